//! Pipeline configuration: a flat `key = value` text file whose keys double
//! as command-line flag names.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{FeatureKind, FeatureSpec, GridStrategy, Schema};
use crate::fdmetrics::SpatialMetric;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

/// Raw key/value pairs, later entries overriding earlier ones only through
/// [`ConfigMap::set`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            }
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key: key.to_string() });
            }
        }
        Ok(ConfigMap(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        ConfigMap::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.0.insert(key.to_string(), value.to_string());
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: 0, text: pair.to_string() })?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorChoice {
    Knn { k: usize },
    Linear,
    External { command: String },
}

impl fmt::Display for PredictorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictorChoice::Knn { .. } => f.write_str("knn"),
            PredictorChoice::Linear => f.write_str("linear"),
            PredictorChoice::External { .. } => f.write_str("external"),
        }
    }
}

/// Matrices are written only up to this many observations unless
/// `output.matrices` says otherwise.
pub const AUTO_MATRIX_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixOutput {
    Auto,
    Always,
    Never,
}

impl MatrixOutput {
    pub fn enabled(self, n: usize) -> bool {
        match self {
            MatrixOutput::Auto => n <= AUTO_MATRIX_LIMIT,
            MatrixOutput::Always => true,
            MatrixOutput::Never => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeFilter {
    pub column: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: PathBuf,
    pub schema: Schema,
    pub filters: Vec<RangeFilter>,
    pub feature: String,
    pub predictor: PredictorChoice,
    pub grid_size: usize,
    pub grid_strategy: GridStrategy,
    pub train_fraction: Option<f64>,
    pub log_response: bool,
    pub strata: usize,
    /// `None` samples `min(n, DEFAULT_SAMPLE_TOTAL)` rows.
    pub sample_total: Option<usize>,
    pub seed: u64,
    pub bandwidth: Option<f64>,
    pub dense_size: usize,
    pub spatial_metric: SpatialMetric,
    pub k_min: usize,
    pub k_max: usize,
    pub final_k: usize,
    pub alpha: Option<f64>,
    pub alpha_grid: Vec<f64>,
    pub matrices: MatrixOutput,
    pub out: Option<PathBuf>,
}

pub const DEFAULT_SAMPLE_TOTAL: usize = 5000;
pub const MAX_CLUSTERS: usize = 10;

const KEYS: &[&str] = &[
    "data",
    "feature",
    "predictor",
    "external-cmd",
    "knn.k",
    "schema.features",
    "schema.response",
    "schema.latitude",
    "schema.longitude",
    "grid.size",
    "grid.strategy",
    "split.train-fraction",
    "split.log-response",
    "sample.strata",
    "sample.total",
    "seed",
    "smoothing.bandwidth",
    "smoothing.dense-size",
    "spatial.metric",
    "k-min",
    "k-max",
    "cluster.k",
    "cluster.alpha",
    "alpha-grid",
    "output.matrices",
    "out",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| invalid(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(invalid(key, format!("expected true or false, got `{other}`"))),
    }
}

/// `name`, `name:numeric`, `name:categorical` or `name:categorical(a|b|c)`,
/// comma separated.
pub fn parse_features(value: &str) -> Result<Vec<FeatureSpec>, ConfigError> {
    let key = "schema.features";
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (name, kind) = item.split_once(':').unwrap_or((item, "numeric"));
            let name = name.trim();
            let kind = kind.trim();
            if kind == "numeric" {
                Ok(FeatureSpec::numeric(name))
            } else if kind == "categorical" {
                Ok(FeatureSpec::categorical(name, &[]))
            } else if let Some(levels) = kind.strip_prefix("categorical(").and_then(|k| k.strip_suffix(')')) {
                let levels: Vec<&str> = levels.split('|').map(str::trim).collect();
                Ok(FeatureSpec::categorical(name, &levels))
            } else {
                Err(invalid(key, format!("unknown kind `{kind}` for `{name}`")))
            }
        })
        .collect()
}

fn format_features(features: &[FeatureSpec]) -> String {
    features
        .iter()
        .map(|f| match &f.kind {
            FeatureKind::Numeric => format!("{}:numeric", f.name),
            FeatureKind::Categorical { levels } if levels.is_empty() => format!("{}:categorical", f.name),
            FeatureKind::Categorical { levels } => format!("{}:categorical({})", f.name, levels.join("|")),
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Comma-separated values; `a,b,...,c` expands to the arithmetic sequence
/// from `a` to `c` with step `b - a`.
pub fn parse_alpha_grid(value: &str) -> Result<Vec<f64>, ConfigError> {
    let key = "alpha-grid";
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let grid = if parts.len() == 4 && parts[2] == "..." {
        let a: f64 = parse_num(key, parts[0])?;
        let b: f64 = parse_num(key, parts[1])?;
        let c: f64 = parse_num(key, parts[3])?;
        let steps = (c - a) / (b - a);
        if !(b > a && c > b) || (steps - steps.round()).abs() > 1e-9 {
            return Err(invalid(key, "`a,b,...,c` needs a < b < c with c - a a multiple of b - a"));
        }
        let steps = steps.round() as usize;
        (0..=steps).map(|i| a + (c - a) * i as f64 / steps as f64).collect()
    } else {
        parts.iter().map(|p| parse_num(key, p)).collect::<Result<Vec<f64>, _>>()?
    };
    if grid.first() != Some(&0.0) || grid.last() != Some(&1.0) {
        return Err(invalid(key, "grid must start at 0 and end at 1"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(key, "grid must be strictly increasing"));
    }
    Ok(grid)
}

impl PipelineConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        if let Some(key) = map.0.keys().find(|k| !KEYS.contains(&k.as_str()) && !k.starts_with("filter.")) {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        let get = |k: &str| map.get(k).filter(|v| !v.is_empty());
        let num = |k: &str, default: usize| -> Result<usize, ConfigError> {
            get(k).map_or(Ok(default), |v| parse_num(k, v))
        };
        let optional_f64 = |k: &str| -> Result<Option<f64>, ConfigError> {
            match get(k) {
                None | Some("auto") | Some("none") => Ok(None),
                Some(v) => parse_num(k, v).map(Some),
            }
        };

        let data = PathBuf::from(get("data").ok_or(ConfigError::Missing("data"))?);
        let feature = get("feature").ok_or(ConfigError::Missing("feature"))?.to_string();

        let schema = match get("schema.features") {
            None => {
                if ["schema.response", "schema.latitude", "schema.longitude"].iter().any(|k| get(k).is_some()) {
                    return Err(invalid("schema.features", "required when other schema keys are given"));
                }
                Schema::montevideo()
            }
            Some(v) => Schema::new(
                parse_features(v)?,
                get("schema.response").unwrap_or("lpreciom2"),
                get("schema.latitude").unwrap_or("lat"),
                get("schema.longitude").unwrap_or("long"),
            )
            .map_err(|e| invalid("schema.features", e.to_string()))?,
        };
        match schema.features().iter().find(|f| f.name == feature) {
            None => return Err(invalid("feature", format!("`{feature}` is not a schema feature"))),
            Some(f) if !f.is_numeric() => return Err(invalid("feature", format!("`{feature}` is not numeric"))),
            Some(_) => {}
        }

        let mut filters = Vec::new();
        for (key, value) in map.0.iter().filter(|(k, _)| k.starts_with("filter.")) {
            let column = &key["filter.".len()..];
            let (lo, hi) = value.split_once(':').ok_or_else(|| invalid(key, "expected `min:max`"))?;
            let min: f64 = parse_num(key, lo.trim())?;
            let max: f64 = parse_num(key, hi.trim())?;
            if !(min <= max) {
                return Err(invalid(key, "min exceeds max"));
            }
            let known = column == schema.response()
                || schema.features().iter().any(|f| f.name == column && f.is_numeric());
            if !known {
                return Err(invalid(key, format!("`{column}` is not a numeric feature or the response")));
            }
            filters.push(RangeFilter { column: column.to_string(), min, max });
        }

        let predictor = match get("predictor").unwrap_or("knn") {
            "knn" => {
                let k = num("knn.k", 10)?;
                if k == 0 {
                    return Err(invalid("knn.k", "must be at least 1"));
                }
                PredictorChoice::Knn { k }
            }
            "linear" => PredictorChoice::Linear,
            "external" => PredictorChoice::External {
                command: get("external-cmd").ok_or(ConfigError::Missing("external-cmd"))?.to_string(),
            },
            other => return Err(invalid("predictor", format!("expected knn, linear or external, got `{other}`"))),
        };

        let grid_size = num("grid.size", 50)?;
        if grid_size < 2 {
            return Err(invalid("grid.size", "must be at least 2"));
        }
        let grid_strategy = get("grid.strategy")
            .unwrap_or("uniform")
            .parse()
            .map_err(|e: String| invalid("grid.strategy", e))?;

        let train_fraction = match get("split.train-fraction") {
            None => Some(2.0 / 3.0),
            Some("none") => None,
            Some(v) => {
                let f: f64 = parse_num("split.train-fraction", v)?;
                if !(f > 0.0 && f < 1.0) {
                    return Err(invalid("split.train-fraction", "must lie strictly between 0 and 1"));
                }
                Some(f)
            }
        };
        let log_response = get("split.log-response").map_or(Ok(false), |v| parse_bool("split.log-response", v))?;

        let strata = num("sample.strata", 10)?;
        if strata == 0 {
            return Err(invalid("sample.strata", "must be at least 1"));
        }
        let sample_total = match get("sample.total") {
            None | Some("auto") => None,
            Some(v) => Some(parse_num::<usize>("sample.total", v)?),
        };
        if sample_total.is_some_and(|t| t < 2) {
            return Err(invalid("sample.total", "must be at least 2"));
        }
        let seed = get("seed").map_or(Ok(1), |v| parse_num("seed", v))?;

        let bandwidth = optional_f64("smoothing.bandwidth")?;
        if bandwidth.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            return Err(invalid("smoothing.bandwidth", "must be positive"));
        }
        let dense_size = num("smoothing.dense-size", crate::smoothing::DEFAULT_DENSE_SIZE)?;
        if dense_size < 2 {
            return Err(invalid("smoothing.dense-size", "must be at least 2"));
        }
        let spatial_metric = get("spatial.metric")
            .unwrap_or("planar")
            .parse()
            .map_err(|e: String| invalid("spatial.metric", e))?;

        let k_min = num("k-min", 3)?;
        let k_max = num("k-max", 5)?;
        if k_min < 2 || k_max > MAX_CLUSTERS || k_min > k_max {
            return Err(invalid("k-min", format!("cluster range must satisfy 2 <= k-min <= k-max <= {MAX_CLUSTERS}")));
        }
        let final_k = num("cluster.k", 4.clamp(k_min, k_max))?;
        if !(k_min..=k_max).contains(&final_k) {
            return Err(invalid("cluster.k", format!("{final_k} is outside {k_min}..={k_max}")));
        }
        let alpha = optional_f64("cluster.alpha")?;
        if alpha.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(invalid("cluster.alpha", "must lie in [0, 1]"));
        }
        let alpha_grid = parse_alpha_grid(get("alpha-grid").unwrap_or("0,0.1,...,1"))?;

        let matrices = match get("output.matrices").unwrap_or("auto") {
            "auto" => MatrixOutput::Auto,
            v if parse_bool("output.matrices", v)? => MatrixOutput::Always,
            _ => MatrixOutput::Never,
        };
        let out = get("out").map(PathBuf::from);

        Ok(PipelineConfig {
            data,
            schema,
            filters,
            feature,
            predictor,
            grid_size,
            grid_strategy,
            train_fraction,
            log_response,
            strata,
            sample_total,
            seed,
            bandwidth,
            dense_size,
            spatial_metric,
            k_min,
            k_max,
            final_k,
            alpha,
            alpha_grid,
            matrices,
            out,
        })
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        (self.k_min..=self.k_max).collect()
    }

    /// Every resolved setting except the output directory, sorted by key.
    /// Feeding these pairs back through [`PipelineConfig::from_map`] yields
    /// the same configuration.
    pub fn echo(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map_or("auto".to_string(), |x| x.to_string());
        let mut pairs = vec![
            ("data".to_string(), self.data.display().to_string()),
            ("feature".into(), self.feature.clone()),
            ("predictor".into(), self.predictor.to_string()),
            ("schema.features".into(), format_features(self.schema.features())),
            ("schema.response".into(), self.schema.response().to_string()),
            ("schema.latitude".into(), self.schema.latitude().to_string()),
            ("schema.longitude".into(), self.schema.longitude().to_string()),
            ("grid.size".into(), self.grid_size.to_string()),
            ("grid.strategy".into(), self.grid_strategy.to_string()),
            ("split.train-fraction".into(), self.train_fraction.map_or("none".to_string(), |f| f.to_string())),
            ("split.log-response".into(), self.log_response.to_string()),
            ("sample.strata".into(), self.strata.to_string()),
            ("sample.total".into(), self.sample_total.map_or("auto".to_string(), |t| t.to_string())),
            ("seed".into(), self.seed.to_string()),
            ("smoothing.bandwidth".into(), opt(self.bandwidth)),
            ("smoothing.dense-size".into(), self.dense_size.to_string()),
            ("spatial.metric".into(), self.spatial_metric.to_string()),
            ("k-min".into(), self.k_min.to_string()),
            ("k-max".into(), self.k_max.to_string()),
            ("cluster.k".into(), self.final_k.to_string()),
            ("cluster.alpha".into(), opt(self.alpha)),
            (
                "alpha-grid".into(),
                self.alpha_grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            ),
            (
                "output.matrices".into(),
                match self.matrices {
                    MatrixOutput::Auto => "auto",
                    MatrixOutput::Always => "true",
                    MatrixOutput::Never => "false",
                }
                .to_string(),
            ),
        ];
        match &self.predictor {
            PredictorChoice::Knn { k } => pairs.push(("knn.k".into(), k.to_string())),
            PredictorChoice::External { command } => pairs.push(("external-cmd".into(), command.clone())),
            PredictorChoice::Linear => {}
        }
        for f in &self.filters {
            pairs.push((format!("filter.{}", f.column), format!("{}:{}", f.min, f.max)));
        }
        pairs.sort();
        pairs
    }
}
