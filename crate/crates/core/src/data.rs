//! Tabular ingestion: schemas, datasets, feature grids, splits and
//! response-stratified sampling.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("could not read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("input is empty")]
    Empty,
    #[error("missing declared column `{0}`")]
    MissingColumn(String),
    #[error("{count} row(s) with unparseable fields, e.g. {examples}")]
    BadRows { count: usize, examples: String },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` is not numeric")]
    NotNumeric(String),
    #[error("feature `{0}` is constant; a grid needs a non-degenerate range")]
    ConstantFeature(String),
    #[error("grid needs at least 2 points, got {0}")]
    GridTooSmall(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("need at least {needed} rows, dataset has {n}")]
    TooFewRows { needed: usize, n: usize },
    #[error("strata count must be at least 1")]
    NoStrata,
    #[error("row index {index} out of range for {n} rows")]
    RowOutOfRange { index: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    /// Nominal feature. An empty level list means "infer sorted levels from data".
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numeric(name: &str) -> Self {
        FeatureSpec { name: name.to_string(), kind: FeatureKind::Numeric }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical { levels: levels.iter().map(|s| s.to_string()).collect() },
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.kind, FeatureKind::Numeric)
    }

    pub fn levels(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Numeric => None,
            FeatureKind::Categorical { levels } => Some(levels),
        }
    }
}

/// Column roles of a dataset: explanatory features, a numeric response and
/// a pair of coordinate columns in decimal degrees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    features: Vec<FeatureSpec>,
    response: String,
    latitude: String,
    longitude: String,
}

impl Schema {
    pub fn new(
        features: Vec<FeatureSpec>,
        response: &str,
        latitude: &str,
        longitude: &str,
    ) -> Result<Self, DataError> {
        let mut seen = BTreeSet::new();
        for f in &features {
            if f.name.is_empty() {
                return Err(DataError::Schema("empty feature name".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(DataError::Schema(format!("duplicate feature `{}`", f.name)));
            }
        }
        for role in [response, latitude, longitude] {
            if seen.contains(role) {
                return Err(DataError::Schema(format!(
                    "`{role}` is used both as a feature and as response/coordinate"
                )));
            }
        }
        if response == latitude || response == longitude || latitude == longitude {
            return Err(DataError::Schema(
                "response, latitude and longitude must be distinct columns".into(),
            ));
        }
        if !features.iter().any(FeatureSpec::is_numeric) {
            return Err(DataError::Schema("at least one numeric feature is required".into()));
        }
        Ok(Schema {
            features,
            response: response.to_string(),
            latitude: latitude.to_string(),
            longitude: longitude.to_string(),
        })
    }

    /// Column layout of the Montevideo apartment listings.
    pub fn montevideo() -> Self {
        let features = vec![
            FeatureSpec::numeric("amenities"),
            FeatureSpec::numeric("bedrooms"),
            FeatureSpec::numeric("bathroom"),
            FeatureSpec::numeric("elevators"),
            FeatureSpec::categorical("condition", &["new", "used"]),
            FeatureSpec::numeric("expenses"),
            FeatureSpec::numeric("garage"),
            FeatureSpec::numeric("ldistance_beach"),
            FeatureSpec::numeric("lsup_constru"),
            FeatureSpec::categorical("neighborhoodgr", &[]),
        ];
        Schema::new(features, "lpreciom2", "lat", "long").expect("static schema is valid")
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn response(&self) -> &str {
        &self.response
    }

    pub fn latitude(&self) -> &str {
        &self.latitude
    }

    pub fn longitude(&self) -> &str {
        &self.longitude
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Level codes index into the owning feature's level list.
    Categorical(Vec<u32>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    fn value(&self, row: usize) -> f64 {
        match self {
            Column::Numeric(v) => v[row],
            Column::Categorical(v) => f64::from(v[row]),
        }
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Row-major feature matrix handed to predictors. Categorical entries hold
/// level codes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRows {
    ncols: usize,
    data: Vec<f64>,
}

impl FeatureRows {
    pub fn new(ncols: usize, data: Vec<f64>) -> Self {
        assert!(ncols > 0 && data.len().is_multiple_of(ncols), "ragged feature matrix");
        FeatureRows { ncols, data }
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.data.len() / self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.ncols)
    }

    pub fn set_column(&mut self, col: usize, value: f64) {
        for row in self.data.chunks_exact_mut(self.ncols) {
            row[col] = value;
        }
    }
}

/// Validated in-memory table. Categorical level lists in the attached
/// schema are always resolved (never empty placeholders).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    columns: Vec<Column>,
    response: Vec<f64>,
    latitude: Vec<f64>,
    longitude: Vec<f64>,
}

fn is_missing(token: &str) -> bool {
    let t = token.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("null")
}

fn parse_finite(token: &str) -> Option<f64> {
    token.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    read_dataset(file, schema)
}

/// Parses comma-separated text with a header row. Rows with a missing
/// value in any used column are dropped; rows with unparseable values are
/// reported together with their line numbers.
pub fn read_dataset<R: Read>(reader: R, schema: &Schema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(DataError::Empty);
    }
    let locate = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let feature_pos = schema
        .features
        .iter()
        .map(|f| locate(&f.name))
        .collect::<Result<Vec<_>, _>>()?;
    let response_pos = locate(&schema.response)?;
    let lat_pos = locate(&schema.latitude)?;
    let lon_pos = locate(&schema.longitude)?;

    let nf = schema.features.len();
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); nf];
    let mut raw_levels: Vec<Vec<String>> = vec![Vec::new(); nf];
    let mut response = Vec::new();
    let mut latitude = Vec::new();
    let mut longitude = Vec::new();
    let mut bad_lines: Vec<(u64, String)> = Vec::new();
    let mut dropped = 0usize;
    let mut records = 0usize;

    for record in rdr.records() {
        let record = record?;
        records += 1;
        let line = record.position().map_or(0, |p| p.line());
        let field = |pos: usize| record.get(pos).unwrap_or("");

        let used = feature_pos.iter().chain([&response_pos, &lat_pos, &lon_pos]);
        if used.clone().any(|&p| is_missing(field(p))) {
            dropped += 1;
            continue;
        }

        let mut problem = None;
        let mut num_row = vec![0.0; nf];
        let mut cat_row = vec![String::new(); nf];
        for (k, spec) in schema.features.iter().enumerate() {
            let token = field(feature_pos[k]).trim();
            match &spec.kind {
                FeatureKind::Numeric => match parse_finite(token) {
                    Some(v) => num_row[k] = v,
                    None => {
                        problem = Some(format!("non-numeric `{token}` in `{}`", spec.name));
                        break;
                    }
                },
                FeatureKind::Categorical { levels } => {
                    if !levels.is_empty() && !levels.iter().any(|l| l == token) {
                        problem = Some(format!("undeclared level `{token}` in `{}`", spec.name));
                        break;
                    }
                    cat_row[k] = token.to_string();
                }
            }
        }
        let mut scalars = [0.0; 3];
        if problem.is_none() {
            for (slot, (pos, name)) in [
                (response_pos, &schema.response),
                (lat_pos, &schema.latitude),
                (lon_pos, &schema.longitude),
            ]
            .into_iter()
            .enumerate()
            {
                match parse_finite(field(pos)) {
                    Some(v) => scalars[slot] = v,
                    None => {
                        problem = Some(format!("non-numeric `{}` in `{name}`", field(pos).trim()));
                        break;
                    }
                }
            }
        }
        if let Some(msg) = problem {
            bad_lines.push((line, msg));
            continue;
        }
        for k in 0..nf {
            if schema.features[k].is_numeric() {
                numeric[k].push(num_row[k]);
            } else {
                raw_levels[k].push(std::mem::take(&mut cat_row[k]));
            }
        }
        response.push(scalars[0]);
        latitude.push(scalars[1]);
        longitude.push(scalars[2]);
    }

    if !bad_lines.is_empty() {
        let examples = bad_lines
            .iter()
            .take(5)
            .map(|(line, msg)| format!("line {line}: {msg}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(DataError::BadRows { count: bad_lines.len(), examples });
    }
    if records == 0 {
        return Err(DataError::Empty);
    }
    if dropped > 0 {
        log::info!("dropped {dropped} row(s) with missing values");
    }
    if response.is_empty() {
        return Err(DataError::Empty);
    }

    let mut features = schema.features.clone();
    let mut columns = Vec::with_capacity(nf);
    for (k, spec) in features.iter_mut().enumerate() {
        match &mut spec.kind {
            FeatureKind::Numeric => columns.push(Column::Numeric(std::mem::take(&mut numeric[k]))),
            FeatureKind::Categorical { levels } => {
                if levels.is_empty() {
                    let set: BTreeSet<&str> = raw_levels[k].iter().map(String::as_str).collect();
                    *levels = set.into_iter().map(str::to_string).collect();
                }
                let codes = raw_levels[k]
                    .iter()
                    .map(|v| levels.iter().position(|l| l == v).expect("level validated") as u32)
                    .collect();
                columns.push(Column::Categorical(codes));
            }
        }
    }
    let schema = Schema { features, ..schema.clone() };
    Ok(Dataset { schema, columns, response, latitude, longitude })
}

impl Dataset {
    /// Builds a dataset from already-validated column vectors.
    pub fn from_columns(
        schema: Schema,
        columns: Vec<Column>,
        response: Vec<f64>,
        latitude: Vec<f64>,
        longitude: Vec<f64>,
    ) -> Result<Self, DataError> {
        let n = response.len();
        if columns.len() != schema.features.len() {
            return Err(DataError::Schema("column count differs from schema".into()));
        }
        if latitude.len() != n || longitude.len() != n || columns.iter().any(|c| c.len() != n) {
            return Err(DataError::Schema("columns have unequal lengths".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&response) || !finite(&latitude) || !finite(&longitude) {
            return Err(DataError::Schema("non-finite value".into()));
        }
        for (spec, col) in schema.features.iter().zip(&columns) {
            match (&spec.kind, col) {
                (FeatureKind::Numeric, Column::Numeric(v)) if finite(v) => {}
                (FeatureKind::Categorical { levels }, Column::Categorical(codes))
                    if !levels.is_empty() && codes.iter().all(|&c| (c as usize) < levels.len()) => {}
                _ => {
                    return Err(DataError::Schema(format!(
                        "column `{}` does not match its declared kind",
                        spec.name
                    )))
                }
            }
        }
        Ok(Dataset { schema, columns, response, latitude, longitude })
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn column(&self, name: &str) -> Result<&Column, DataError> {
        let k = self
            .schema
            .feature_index(name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))?;
        Ok(&self.columns[k])
    }

    pub fn numeric_column(&self, name: &str) -> Result<&[f64], DataError> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Categorical(_) => Err(DataError::NotNumeric(name.to_string())),
        }
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn latitude(&self) -> &[f64] {
        &self.latitude
    }

    pub fn longitude(&self) -> &[f64] {
        &self.longitude
    }

    pub fn coordinates(&self) -> Vec<(f64, f64)> {
        self.latitude.iter().copied().zip(self.longitude.iter().copied()).collect()
    }

    /// Feature matrix for the given rows, in schema column order.
    pub fn feature_rows(&self, rows: &[usize]) -> FeatureRows {
        let ncols = self.columns.len();
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for &r in rows {
            data.extend(self.columns.iter().map(|c| c.value(r)));
        }
        FeatureRows::new(ncols, data)
    }

    pub fn all_rows(&self) -> FeatureRows {
        self.feature_rows(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn select(&self, rows: &[usize]) -> Result<Dataset, DataError> {
        let n = self.len();
        if let Some(&index) = rows.iter().find(|&&i| i >= n) {
            return Err(DataError::RowOutOfRange { index, n });
        }
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(Dataset {
            schema: self.schema.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            response: pick(&self.response),
            latitude: pick(&self.latitude),
            longitude: pick(&self.longitude),
        })
    }

    /// Keeps rows whose value in `column` (a numeric feature or the
    /// response) lies in `[min, max]`.
    pub fn retain_in_range(&self, column: &str, min: f64, max: f64) -> Result<Dataset, DataError> {
        let values = if column == self.schema.response {
            &self.response[..]
        } else {
            self.numeric_column(column)?
        };
        let keep: Vec<usize> =
            (0..self.len()).filter(|&i| values[i] >= min && values[i] <= max).collect();
        let removed = self.len() - keep.len();
        if removed > 0 {
            log::info!("filter on `{column}` removed {removed} row(s)");
        }
        self.select(&keep)
    }

    /// Writes the dataset back as comma-separated text with a header row.
    /// Floats use shortest round-trip formatting, so reloading is lossless.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.schema.features.iter().map(|f| f.name.as_str()).collect();
        header.extend([
            self.schema.response.as_str(),
            self.schema.latitude.as_str(),
            self.schema.longitude.as_str(),
        ]);
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = Vec::with_capacity(header.len());
            for (spec, col) in self.schema.features.iter().zip(&self.columns) {
                record.push(match col {
                    Column::Numeric(v) => v[i].to_string(),
                    Column::Categorical(c) => spec.levels().expect("categorical")[c[i] as usize].clone(),
                });
            }
            record.push(self.response[i].to_string());
            record.push(self.latitude[i].to_string());
            record.push(self.longitude[i].to_string());
            w.write_record(&record)?;
        }
        w.flush().map_err(|source| DataError::Io { path: "<writer>".into(), source })?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridStrategy {
    Uniform,
    Quantile,
}

impl fmt::Display for GridStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridStrategy::Uniform => "uniform",
            GridStrategy::Quantile => "quantile",
        })
    }
}

impl std::str::FromStr for GridStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(GridStrategy::Uniform),
            "quantile" => Ok(GridStrategy::Quantile),
            other => Err(format!("unknown grid strategy `{other}`")),
        }
    }
}

/// Strictly increasing evaluation points for the swept feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    feature: String,
    values: Vec<f64>,
    strategy: GridStrategy,
}

impl FeatureGrid {
    pub fn new(feature: &str, values: Vec<f64>, strategy: GridStrategy) -> Result<Self, DataError> {
        if values.len() < 2 {
            return Err(DataError::GridTooSmall(values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DataError::InvalidGrid("values must be finite and strictly increasing".into()));
        }
        Ok(FeatureGrid { feature: feature.to_string(), values, strategy })
    }

    pub fn feature(&self) -> &str {
        &self.feature
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn strategy(&self) -> GridStrategy {
        self.strategy
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn span(&self) -> f64 {
        self.max() - self.min()
    }
}

/// Empirical quantile of sorted data, linear interpolation between order
/// statistics (the "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn build_grid(
    dataset: &Dataset,
    feature: &str,
    size: usize,
    strategy: GridStrategy,
) -> Result<FeatureGrid, DataError> {
    let values = dataset.numeric_column(feature)?;
    if size < 2 {
        return Err(DataError::GridTooSmall(size));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if max <= min {
        return Err(DataError::ConstantFeature(feature.to_string()));
    }
    let last = (size - 1) as f64;
    let mut points: Vec<f64> = match strategy {
        GridStrategy::Uniform => (0..size)
            .map(|k| if k + 1 == size { max } else { min + (max - min) * (k as f64 / last) })
            .collect(),
        GridStrategy::Quantile => (0..size).map(|k| quantile_sorted(&sorted, k as f64 / last)).collect(),
    };
    points.dedup();
    FeatureGrid::new(feature, points, strategy)
}

/// Shuffled disjoint split of `0..n`; each side comes back sorted.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }
    if n < 2 {
        return Err(DataError::TooFewRows { needed: 2, n });
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn train_test_split(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let (train, test) = split_indices(dataset.len(), train_fraction, seed)?;
    Ok((dataset.select(&train)?, dataset.select(&test)?))
}

/// Row indices drawn per response stratum, with the stratum of each index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StratifiedSample {
    pub indices: Vec<usize>,
    pub strata: Vec<usize>,
}

/// Cuts the response into `strata_count` equal-probability strata (by rank,
/// ties broken by row index) and draws an even share from each without
/// replacement. Remainders go to the largest strata, lower stratum first.
pub fn stratified_sample(
    dataset: &Dataset,
    strata_count: usize,
    total: usize,
    seed: u64,
) -> Result<StratifiedSample, DataError> {
    let n = dataset.len();
    if strata_count == 0 {
        return Err(DataError::NoStrata);
    }
    if total > n {
        return Err(DataError::TooFewRows { needed: total, n });
    }
    let response = dataset.response();
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| response[a].total_cmp(&response[b]).then(a.cmp(&b)));

    let bounds: Vec<usize> = (0..=strata_count).map(|s| s * n / strata_count).collect();
    let sizes: Vec<usize> = bounds.windows(2).map(|w| w[1] - w[0]).collect();

    let base = total / strata_count;
    let mut quotas = vec![base; strata_count];
    let mut by_size: Vec<usize> = (0..strata_count).collect();
    by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    for &s in by_size.iter().take(total % strata_count) {
        quotas[s] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(usize, usize)> = Vec::with_capacity(total);
    for s in 0..strata_count {
        let members = &ranked[bounds[s]..bounds[s + 1]];
        debug_assert!(quotas[s] <= members.len());
        let draw = rand::seq::index::sample(&mut rng, members.len(), quotas[s]);
        picked.extend(draw.iter().map(|k| (members[k], s)));
    }
    picked.sort_unstable();
    Ok(StratifiedSample {
        indices: picked.iter().map(|p| p.0).collect(),
        strata: picked.iter().map(|p| p.1).collect(),
    })
}
