//! Run configuration: a TOML file with dotted sections, validated key by key.
//!
//! Recognised keys (all optional):
//!
//! | key | default |
//! |---|---|
//! | `grid.dim`, `grid.n` | 1, 257 |
//! | `problem.mu`, `problem.m0` | 0.01, 0.4 |
//! | `resource.kind` | `constant` (`intervals`, `rectangles`, `field`) |
//! | `resource.intervals` | `[[a, b], ...]`, 1D |
//! | `resource.rectangles` | `[[x0, x1, y0, y1], ...]`, 2D |
//! | `resource.path` | field CSV, relative to the config file |
//! | `solver.tol`, `solver.max_newton`, `solver.max_linesearch`, `solver.fallback_gradient_flow` | 1e-10, 200, 40, true |
//! | `optimizer.restarts`, `optimizer.seed`, `optimizer.max_iter`, `optimizer.max_polish` | 5, 0, 400, 50 |
//! | `sweep.mu_min`, `sweep.mu_max`, `sweep.points` | 1e-4, 1e-1, 12 |
//! | `sweep.resolution`, `sweep.min_n`, `sweep.max_n` | 0.1, 257, 4097 |
//! | `criterion.j` | `identity` (`quadratic`, `log1p`, `tabulated`) |
//! | `criterion.table` | `t, j, j', j''` CSV for `tabulated` |
//! | `spectral.k`, `spectral.k_max` | 10, 64 |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use logfrag_core::criterion::{Criterion, Preset, Tabulated};
use logfrag_core::fragmentation::{indicator_1d, GridPolicy};
use logfrag_core::io::{read_field_csv, read_tabulated_criterion};
use logfrag_core::optimizer::OptimizerConfig;
use logfrag_core::{Field, Grid, ResourceDistribution, SolverConfig};
use serde_json::Value;
use thiserror::Error;
use toml::Value as Toml;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config is not valid TOML: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{key}: {message}")]
    Key { key: String, message: String },
}

fn key_error(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Key {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResourceSpec {
    Constant,
    Intervals(Vec<(f64, f64)>),
    Rectangles(Vec<[f64; 4]>),
    Field(PathBuf),
}

#[derive(Debug, Clone)]
pub enum CriterionSpec {
    Preset(Preset),
    Tabulated { path: PathBuf, table: Tabulated },
}

impl CriterionSpec {
    pub fn as_criterion(&self) -> &dyn Criterion {
        match self {
            Self::Preset(p) => p,
            Self::Tabulated { table, .. } => table,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Preset(Preset::Identity))
    }
}

#[derive(Debug, Clone)]
pub struct SweepSection {
    pub mu_min: f64,
    pub mu_max: f64,
    pub points: usize,
    pub policy: GridPolicy,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub grid: Grid,
    pub mu: f64,
    pub m0: f64,
    pub resource_spec: ResourceSpec,
    /// Resource built from `resource.*` on `grid`.
    pub resource: ResourceDistribution,
    pub solver: SolverConfig,
    pub optimizer: OptimizerConfig,
    pub sweep: SweepSection,
    pub criterion: CriterionSpec,
    pub spectral_k: usize,
    pub spectral_k_max: usize,
}

/// Flattened `section.key` view of a TOML document; keys are removed as
/// they are read so leftovers can be reported.
struct Keys(BTreeMap<String, Toml>);

impl Keys {
    fn new(doc: toml::Table) -> Self {
        fn walk(prefix: &str, t: toml::Table, out: &mut BTreeMap<String, Toml>) {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k
                } else {
                    format!("{prefix}.{k}")
                };
                match v {
                    Toml::Table(inner) => walk(&key, inner, out),
                    other => {
                        out.insert(key, other);
                    }
                }
            }
        }
        let mut out = BTreeMap::new();
        walk("", doc, &mut out);
        Self(out)
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.0.remove(key) {
            None => Ok(default),
            Some(Toml::Float(x)) => Ok(x),
            Some(Toml::Integer(i)) => Ok(i as f64),
            Some(other) => Err(key_error(key, format!("expected a number, got {other}"))),
        }
    }

    fn uint(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.0.remove(key) {
            None => Ok(default),
            Some(Toml::Integer(i)) if i >= 0 => Ok(i as u64),
            Some(other) => Err(key_error(
                key,
                format!("expected a non-negative integer, got {other}"),
            )),
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.uint(key, default as u64)? as usize)
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.0.remove(key) {
            None => Ok(default),
            Some(Toml::Boolean(b)) => Ok(b),
            Some(other) => Err(key_error(
                key,
                format!("expected true or false, got {other}"),
            )),
        }
    }

    fn string(&mut self, key: &str) -> Result<Option<String>, ConfigError> {
        match self.0.remove(key) {
            None => Ok(None),
            Some(Toml::String(s)) => Ok(Some(s)),
            Some(other) => Err(key_error(key, format!("expected a string, got {other}"))),
        }
    }

    /// Array of fixed-length numeric rows.
    fn rows<const N: usize>(&mut self, key: &str) -> Result<Option<Vec<[f64; N]>>, ConfigError> {
        let Some(v) = self.0.remove(key) else {
            return Ok(None);
        };
        let bad = || key_error(key, format!("expected a list of {N}-element numeric lists"));
        let Toml::Array(rows) = v else {
            return Err(bad());
        };
        rows.into_iter()
            .map(|row| {
                let Toml::Array(cells) = row else {
                    return Err(bad());
                };
                if cells.len() != N {
                    return Err(bad());
                }
                let mut out = [0.0; N];
                for (slot, c) in out.iter_mut().zip(cells) {
                    *slot = match c {
                        Toml::Float(x) => x,
                        Toml::Integer(i) => i as f64,
                        _ => return Err(bad()),
                    };
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.0.into_keys().next() {
            None => Ok(()),
            Some(k) => Err(key_error(&k, "unknown key")),
        }
    }
}

/// Absolute form of a path given relative to the config file.
fn resolve(base: &Path, rel: String) -> PathBuf {
    let joined = base.join(rel);
    std::fs::canonicalize(&joined).unwrap_or(joined)
}

fn positive(key: &str, name: &str, x: f64) -> Result<f64, ConfigError> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(key_error(key, format!("{name} must be positive, got {x}")))
    }
}

impl Config {
    /// Defaults for every key.
    pub fn minimal() -> Result<Self, ConfigError> {
        Self::from_toml_str("", Path::new("."))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Parses and validates; relative file paths resolve against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut keys = Keys::new(text.parse::<toml::Table>()?);

        let dim = keys.usize("grid.dim", 1)?;
        if !(dim == 1 || dim == 2) {
            return Err(key_error(
                "grid.dim",
                format!("dim must be 1 or 2, got {dim}"),
            ));
        }
        let n = keys.usize("grid.n", if dim == 1 { 257 } else { 65 })?;
        let grid = Grid::new(dim, n).map_err(|e| key_error("grid.n", e.to_string()))?;

        let mu = positive("problem.mu", "mu", keys.f64("problem.mu", 0.01)?)?;
        let m0 = keys.f64("problem.m0", 0.4)?;
        if !(m0 > 0.0 && m0 < 1.0) {
            return Err(key_error(
                "problem.m0",
                format!("m0 must lie in (0,1), got {m0}"),
            ));
        }

        let kind = keys
            .string("resource.kind")?
            .unwrap_or_else(|| "constant".into());
        let intervals = keys.rows::<2>("resource.intervals")?;
        let rectangles = keys.rows::<4>("resource.rectangles")?;
        let field_path = keys.string("resource.path")?;
        let resource_spec = match kind.as_str() {
            "constant" => ResourceSpec::Constant,
            "intervals" => {
                if dim != 1 {
                    return Err(key_error("resource.kind", "intervals need grid.dim = 1"));
                }
                let iv = intervals.ok_or_else(|| {
                    key_error("resource.intervals", "required for kind = intervals")
                })?;
                ResourceSpec::Intervals(iv.into_iter().map(|[a, b]| (a, b)).collect())
            }
            "rectangles" => {
                if dim != 2 {
                    return Err(key_error("resource.kind", "rectangles need grid.dim = 2"));
                }
                ResourceSpec::Rectangles(rectangles.ok_or_else(|| {
                    key_error("resource.rectangles", "required for kind = rectangles")
                })?)
            }
            "field" => ResourceSpec::Field(resolve(
                base,
                field_path
                    .ok_or_else(|| key_error("resource.path", "required for kind = field"))?,
            )),
            other => {
                return Err(key_error(
                    "resource.kind",
                    format!("expected constant, intervals, rectangles or field, got `{other}`"),
                ))
            }
        };
        let resource = build_resource(&grid, m0, &resource_spec)?;

        let defaults = SolverConfig::default();
        let solver = SolverConfig {
            tol: positive("solver.tol", "tol", keys.f64("solver.tol", defaults.tol)?)?,
            max_newton: keys.usize("solver.max_newton", defaults.max_newton)?,
            max_linesearch: keys.usize("solver.max_linesearch", defaults.max_linesearch)?,
            fallback_gradient_flow: keys.bool(
                "solver.fallback_gradient_flow",
                defaults.fallback_gradient_flow,
            )?,
        };
        if solver.max_newton == 0 {
            return Err(key_error("solver.max_newton", "must be at least 1"));
        }

        let od = OptimizerConfig::default();
        let optimizer = OptimizerConfig {
            n_restarts: keys.usize("optimizer.restarts", od.n_restarts)?,
            seed: keys.uint("optimizer.seed", od.seed)?,
            max_iter: keys.usize("optimizer.max_iter", od.max_iter)?,
            max_polish: keys.usize("optimizer.max_polish", od.max_polish)?,
            solver,
            ..od
        };

        let pd = GridPolicy::default();
        let mu_min = positive("sweep.mu_min", "mu_min", keys.f64("sweep.mu_min", 1e-4)?)?;
        let mu_max = positive("sweep.mu_max", "mu_max", keys.f64("sweep.mu_max", 1e-1)?)?;
        if mu_min >= mu_max {
            return Err(key_error(
                "sweep.mu_min",
                format!("mu_min must be below mu_max, got {mu_min} >= {mu_max}"),
            ));
        }
        let points = keys.usize("sweep.points", 12)?;
        if points < 2 {
            return Err(key_error(
                "sweep.points",
                format!("need at least 2 points, got {points}"),
            ));
        }
        let policy = GridPolicy {
            dim,
            resolution: positive(
                "sweep.resolution",
                "resolution",
                keys.f64("sweep.resolution", pd.resolution)?,
            )?,
            min_n: keys.usize("sweep.min_n", pd.min_n)?,
            max_n: keys.usize("sweep.max_n", pd.max_n)?,
        };
        if policy.min_n < 8 {
            return Err(key_error("sweep.min_n", "must be at least 8"));
        }

        let j = keys
            .string("criterion.j")?
            .unwrap_or_else(|| "identity".into());
        let table = keys.string("criterion.table")?;
        let criterion = if j == "tabulated" {
            let path = resolve(
                base,
                table.ok_or_else(|| key_error("criterion.table", "required for j = tabulated"))?,
            );
            let table = read_tabulated_criterion(&path)
                .map_err(|e| key_error("criterion.table", e.to_string()))?;
            CriterionSpec::Tabulated { path, table }
        } else {
            if table.is_some() {
                return Err(key_error("criterion.table", "only used with j = tabulated"));
            }
            CriterionSpec::Preset(
                Preset::parse(&j).map_err(|e| key_error("criterion.j", e.to_string()))?,
            )
        };

        let spectral_k = keys.usize("spectral.k", 10)?;
        if spectral_k == 0 || spectral_k > grid.node_count() / 4 {
            return Err(key_error(
                "spectral.k",
                format!("must lie in 1..={}", grid.node_count() / 4),
            ));
        }
        let spectral_k_max = keys.usize("spectral.k_max", 64)?;
        keys.finish()?;

        Ok(Self {
            grid,
            mu,
            m0,
            resource_spec,
            resource,
            solver,
            optimizer,
            sweep: SweepSection {
                mu_min,
                mu_max,
                points,
                policy,
            },
            criterion,
            spectral_k,
            spectral_k_max,
        })
    }

    /// Every resolved key with its value, for the run manifest. Written as
    /// `key = value` lines it is itself a valid config.
    pub fn echo(&self) -> BTreeMap<String, Value> {
        let mut e = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            e.insert(k.to_string(), v);
        };
        put("grid.dim", self.grid.dim().into());
        put("grid.n", self.grid.n_per_axis().into());
        put("problem.mu", self.mu.into());
        put("problem.m0", self.m0.into());
        match &self.resource_spec {
            ResourceSpec::Constant => put("resource.kind", "constant".into()),
            ResourceSpec::Intervals(iv) => {
                put("resource.kind", "intervals".into());
                put(
                    "resource.intervals",
                    iv.iter()
                        .map(|&(a, b)| vec![a, b])
                        .collect::<Vec<_>>()
                        .into(),
                );
            }
            ResourceSpec::Rectangles(r) => {
                put("resource.kind", "rectangles".into());
                put(
                    "resource.rectangles",
                    r.iter().map(|r| r.to_vec()).collect::<Vec<_>>().into(),
                );
            }
            ResourceSpec::Field(p) => {
                put("resource.kind", "field".into());
                put("resource.path", p.display().to_string().into());
            }
        }
        put("solver.tol", self.solver.tol.into());
        put("solver.max_newton", self.solver.max_newton.into());
        put("solver.max_linesearch", self.solver.max_linesearch.into());
        put(
            "solver.fallback_gradient_flow",
            self.solver.fallback_gradient_flow.into(),
        );
        put("optimizer.restarts", self.optimizer.n_restarts.into());
        put("optimizer.seed", self.optimizer.seed.into());
        put("optimizer.max_iter", self.optimizer.max_iter.into());
        put("optimizer.max_polish", self.optimizer.max_polish.into());
        put("sweep.mu_min", self.sweep.mu_min.into());
        put("sweep.mu_max", self.sweep.mu_max.into());
        put("sweep.points", self.sweep.points.into());
        put("sweep.resolution", self.sweep.policy.resolution.into());
        put("sweep.min_n", self.sweep.policy.min_n.into());
        put("sweep.max_n", self.sweep.policy.max_n.into());
        match &self.criterion {
            CriterionSpec::Preset(p) => put("criterion.j", p.name().into()),
            CriterionSpec::Tabulated { path, .. } => {
                put("criterion.j", "tabulated".into());
                put("criterion.table", path.display().to_string().into());
            }
        }
        put("spectral.k", self.spectral_k.into());
        put("spectral.k_max", self.spectral_k_max.into());
        e
    }
}

fn build_resource(
    g: &Grid,
    m0: f64,
    spec: &ResourceSpec,
) -> Result<ResourceDistribution, ConfigError> {
    let (key, field): (&str, Result<Field, String>) = match spec {
        ResourceSpec::Constant => ("problem.m0", Ok(g.constant(m0))),
        ResourceSpec::Intervals(iv) => (
            "resource.intervals",
            indicator_1d(g, iv).map_err(|e| e.to_string()),
        ),
        ResourceSpec::Rectangles(rects) => {
            let bad = rects.iter().find(|[x0, x1, y0, y1]| {
                !(0.0 <= *x0 && x0 < x1 && *x1 <= 1.0 && 0.0 <= *y0 && y0 < y1 && *y1 <= 1.0)
            });
            match bad {
                Some(r) => (
                    "resource.rectangles",
                    Err(format!("invalid rectangle {r:?}")),
                ),
                None => (
                    "resource.rectangles",
                    Ok(g.sample(|x| {
                        let inside = rects.iter().any(|[x0, x1, y0, y1]| {
                            *x0 <= x[0] && x[0] <= *x1 && *y0 <= x[1] && x[1] <= *y1
                        });
                        if inside {
                            1.0
                        } else {
                            0.0
                        }
                    })),
                ),
            }
        }
        ResourceSpec::Field(p) => (
            "resource.path",
            read_field_csv(p, g).map_err(|e| e.to_string()),
        ),
    };
    let field = field.map_err(|m| key_error(key, m))?;
    ResourceDistribution::new(field).map_err(|e| key_error(key, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Config, ConfigError> {
        Config::from_toml_str(s, Path::new("."))
    }

    fn key_of(e: ConfigError) -> String {
        match e {
            ConfigError::Key { key, .. } => key,
            other => panic!("expected a key error, got {other}"),
        }
    }

    #[test]
    fn empty_config_fills_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.grid.n_per_axis(), 257);
        assert_eq!(c.mu, 0.01);
        assert_eq!(c.resource.mass(), 0.4);
        assert!(c.criterion.is_identity());
        let echo = c.echo();
        assert_eq!(echo["optimizer.seed"], 0);
        assert_eq!(echo["sweep.points"], 12);
    }

    #[test]
    fn m0_out_of_range_names_the_key() {
        let e = parse("[problem]\nm0 = 1.2\n").unwrap_err();
        assert!(e.to_string().contains("m0 must lie in (0,1)"), "{e}");
        assert_eq!(key_of(e), "problem.m0");
    }

    #[test]
    fn zero_mu_is_rejected() {
        assert_eq!(key_of(parse("problem.mu = 0").unwrap_err()), "problem.mu");
        assert_eq!(
            key_of(parse("problem.mu = -1.0").unwrap_err()),
            "problem.mu"
        );
    }

    #[test]
    fn dotted_and_sectioned_keys_agree() {
        let a = parse("grid.n = 129\nproblem.mu = 0.5").unwrap();
        let b = parse("[grid]\nn = 129\n[problem]\nmu = 0.5").unwrap();
        assert_eq!(a.echo(), b.echo());
    }

    #[test]
    fn unknown_and_mistyped_keys_are_reported() {
        assert_eq!(key_of(parse("grid.nn = 3").unwrap_err()), "grid.nn");
        assert_eq!(key_of(parse("grid.n = \"big\"").unwrap_err()), "grid.n");
        assert_eq!(
            key_of(parse("optimizer.seed = -4").unwrap_err()),
            "optimizer.seed"
        );
        assert_eq!(
            key_of(parse("criterion.j = \"cubic\"").unwrap_err()),
            "criterion.j"
        );
        assert!(matches!(parse("grid = ["), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn interval_and_rectangle_resources() {
        let c = parse(
            "resource.kind = \"intervals\"\nresource.intervals = [[0.1, 0.3], [0.5, 0.7]]\ngrid.n = 101",
        )
        .unwrap();
        assert!(c.resource.is_bang_bang());
        assert!((c.resource.mass() - 0.4).abs() < 0.02);
        let c = parse(
            "grid.dim = 2\ngrid.n = 33\nresource.kind = \"rectangles\"\nresource.rectangles = [[0, 0.5, 0, 0.5]]",
        )
        .unwrap();
        assert!((c.resource.mass() - 0.25).abs() < 0.05);
        assert_eq!(
            key_of(
                parse("resource.kind = \"rectangles\"\nresource.rectangles = [[0, 1, 0, 1]]")
                    .unwrap_err()
            ),
            "resource.kind"
        );
        assert_eq!(
            key_of(
                parse("resource.kind = \"intervals\"\nresource.intervals = [[0.5, 0.2]]")
                    .unwrap_err()
            ),
            "resource.intervals"
        );
    }

    #[test]
    fn sweep_range_is_checked() {
        assert_eq!(
            key_of(parse("sweep.mu_min = 0.5\nsweep.mu_max = 0.1").unwrap_err()),
            "sweep.mu_min"
        );
        assert_eq!(
            key_of(parse("sweep.points = 1").unwrap_err()),
            "sweep.points"
        );
    }
}
