//! Black-box prediction contract, two built-in baselines, a line-protocol
//! adapter for external models, and hold-out metrics.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::data::{Dataset, FeatureKind, FeatureRows, FeatureSpec};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("training set is empty")]
    EmptyTraining,
    #[error("k = {k} is invalid for {n} training rows")]
    BadK { k: usize, n: usize },
    #[error("design matrix is singular or has too few rows ({rows} rows, {cols} coefficients)")]
    Singular { rows: usize, cols: usize },
    #[error("batch has {got} columns, model expects {expected}")]
    ColumnMismatch { expected: usize, got: usize },
    #[error("could not start `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty external command")]
    EmptyCommand,
    #[error("cannot send value {0} to external model")]
    Unencodable(f64),
    #[error("external model i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("external model exited before replying")]
    ProcessExited,
    #[error("malformed reply from external model: {raw:?}")]
    MalformedReply { raw: String },
    #[error("external model returned {got} predictions for {expected} rows: {raw:?}")]
    LengthMismatch { expected: usize, got: usize, raw: String },
    #[error("metric inputs: {0}")]
    MetricInput(String),
}

/// A fitted regression model viewed as a function of its feature rows.
///
/// Implementations must be deterministic and length-preserving.
pub trait Predictor: Send + Sync {
    fn name(&self) -> String;

    fn predict(&self, rows: &FeatureRows) -> Result<Vec<f64>, PredictError>;
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn predict(&self, rows: &FeatureRows) -> Result<Vec<f64>, PredictError> {
        (**self).predict(rows)
    }
}

fn check_columns(rows: &FeatureRows, expected: usize) -> Result<(), PredictError> {
    if rows.ncols() != expected {
        return Err(PredictError::ColumnMismatch { expected, got: rows.ncols() });
    }
    Ok(())
}

// --- k nearest neighbours -------------------------------------------------

/// k-NN regressor over standardized numeric features plus a unit penalty per
/// mismatched categorical feature.
#[derive(Debug, Clone)]
pub struct KnnRegressor {
    k: usize,
    categorical: Vec<bool>,
    center: Vec<f64>,
    scale: Vec<f64>,
    train: Vec<f64>,
    response: Vec<f64>,
}

pub fn knn_fit(train: &Dataset, k: usize) -> Result<KnnRegressor, PredictError> {
    let n = train.len();
    if n == 0 {
        return Err(PredictError::EmptyTraining);
    }
    if k == 0 || k > n {
        return Err(PredictError::BadK { k, n });
    }
    let specs = train.schema().features();
    let categorical: Vec<bool> = specs.iter().map(|f| !f.is_numeric()).collect();
    let raw = train.all_rows();
    let ncols = specs.len();
    let mut center = vec![0.0; ncols];
    let mut scale = vec![1.0; ncols];
    for j in (0..ncols).filter(|&j| !categorical[j]) {
        let mean = raw.rows().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = if n > 1 {
            raw.rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        center[j] = mean;
        if var > 0.0 {
            scale[j] = var.sqrt();
        }
    }
    let mut model = KnnRegressor {
        k,
        categorical,
        center,
        scale,
        train: Vec::with_capacity(n * ncols),
        response: train.response().to_vec(),
    };
    for row in raw.rows() {
        let z = model.standardize(row);
        model.train.extend(z);
    }
    Ok(model)
}

impl KnnRegressor {
    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| if self.categorical[j] { v } else { (v - self.center[j]) / self.scale[j] })
            .collect()
    }

    /// Squared mixed distance, or `None` once the partial sum reaches
    /// `bound` (terms are nonnegative, so the full sum could not beat it).
    fn distance2_below(&self, z: &[f64], train_row: &[f64], bound: f64) -> Option<f64> {
        let mut d = 0.0;
        for j in 0..z.len() {
            if self.categorical[j] {
                if z[j] != train_row[j] {
                    d += 1.0;
                }
            } else {
                let diff = z[j] - train_row[j];
                d += diff * diff;
            }
            if d >= bound {
                return None;
            }
        }
        Some(d)
    }

    fn predict_one(&self, row: &[f64]) -> f64 {
        let z = self.standardize(row);
        let ncols = z.len();
        // The k best so far, ascending by (distance, row). Rows arrive in
        // index order, so a later row needs a strictly smaller distance.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        for (i, t) in self.train.chunks_exact(ncols).enumerate() {
            let bound = if best.len() == self.k { best[self.k - 1].0 } else { f64::INFINITY };
            if let Some(d) = self.distance2_below(&z, t, bound) {
                let at = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(at, (d, i));
                best.truncate(self.k);
            }
        }
        best.iter().map(|&(_, i)| self.response[i]).sum::<f64>() / self.k as f64
    }
}

impl Predictor for KnnRegressor {
    fn name(&self) -> String {
        format!("knn(k={})", self.k)
    }

    fn predict(&self, rows: &FeatureRows) -> Result<Vec<f64>, PredictError> {
        check_columns(rows, self.categorical.len())?;
        let rows: Vec<&[f64]> = rows.rows().collect();
        Ok(rows.par_iter().map(|r| self.predict_one(r)).collect())
    }
}

// --- ordinary least squares -----------------------------------------------

/// Affine least-squares fit. Categorical features are one-hot encoded
/// against their first level.
#[derive(Debug, Clone)]
pub struct LinearRegressor {
    kinds: Vec<Option<usize>>,
    intercept: f64,
    coefficients: Vec<f64>,
}

impl LinearRegressor {
    fn design_row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (j, kind) in self.kinds.iter().enumerate() {
            match kind {
                None => out.push(row[j]),
                Some(levels) => {
                    let code = row[j] as usize;
                    out.extend((1..*levels).map(|l| if l == code { 1.0 } else { 0.0 }));
                }
            }
        }
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    /// Slopes in design order: one per numeric feature, `levels - 1` per
    /// categorical feature.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }
}

pub fn linear_fit(train: &Dataset) -> Result<LinearRegressor, PredictError> {
    let n = train.len();
    if n == 0 {
        return Err(PredictError::EmptyTraining);
    }
    let kinds: Vec<Option<usize>> = train
        .schema()
        .features()
        .iter()
        .map(|f: &FeatureSpec| match &f.kind {
            FeatureKind::Numeric => None,
            FeatureKind::Categorical { levels } => Some(levels.len()),
        })
        .collect();
    let mut model = LinearRegressor { kinds, intercept: 0.0, coefficients: Vec::new() };
    let rows = train.all_rows();
    let mut buf = Vec::new();
    let mut design = Vec::new();
    for r in rows.rows() {
        model.design_row(r, &mut buf);
        design.push(1.0);
        design.extend_from_slice(&buf);
    }
    let p = design.len() / n;
    if n <= p {
        return Err(PredictError::Singular { rows: n, cols: p });
    }
    let x = DMatrix::from_row_slice(n, p, &design);
    let y = DVector::from_column_slice(train.response());
    let qr = x.qr();
    let r = qr.r();
    let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if max_diag == 0.0 || (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag) {
        return Err(PredictError::Singular { rows: n, cols: p });
    }
    let rhs = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&rhs)
        .ok_or(PredictError::Singular { rows: n, cols: p })?;
    model.intercept = beta[0];
    model.coefficients = beta.iter().skip(1).copied().collect();
    Ok(model)
}

impl Predictor for LinearRegressor {
    fn name(&self) -> String {
        "linear".to_string()
    }

    fn predict(&self, rows: &FeatureRows) -> Result<Vec<f64>, PredictError> {
        check_columns(rows, self.kinds.len())?;
        let mut buf = Vec::new();
        Ok(rows
            .rows()
            .map(|r| {
                self.design_row(r, &mut buf);
                self.intercept + buf.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }
}

// --- external process -----------------------------------------------------

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Forwards batches to a child process, one JSON line per request and one
/// JSON line per reply. Requests are serialized through a mutex.
pub struct ExternalPredictor {
    command: String,
    levels: Vec<Option<Vec<String>>>,
    pipe: Mutex<Pipe>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Reply {
    predictions: Vec<f64>,
}

/// Spawns `program args...`; `features` supplies column order and the level
/// strings sent for categorical columns.
pub fn external_predictor(
    program: &str,
    args: &[String],
    features: &[FeatureSpec],
) -> Result<ExternalPredictor, PredictError> {
    let command = std::iter::once(program.to_string()).chain(args.iter().cloned()).collect::<Vec<_>>().join(" ");
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|source| PredictError::Spawn { command: command.clone(), source })?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
    Ok(ExternalPredictor {
        command,
        levels: features.iter().map(|f| f.levels().map(<[String]>::to_vec)).collect(),
        pipe: Mutex::new(Pipe { child, stdin, stdout }),
    })
}

/// Whitespace-split convenience wrapper around [`external_predictor`].
pub fn external_predictor_from_command_line(
    command_line: &str,
    features: &[FeatureSpec],
) -> Result<ExternalPredictor, PredictError> {
    let mut parts = command_line.split_whitespace().map(str::to_string);
    let program = parts.next().ok_or(PredictError::EmptyCommand)?;
    let args: Vec<String> = parts.collect();
    external_predictor(&program, &args, features)
}

impl ExternalPredictor {
    /// Request line for a batch, without the trailing newline.
    pub fn encode_request(&self, rows: &FeatureRows) -> Result<String, PredictError> {
        check_columns(rows, self.levels.len())?;
        let mut line = String::from("{\"rows\": [");
        for (i, row) in rows.rows().enumerate() {
            if i > 0 {
                line.push_str(", ");
            }
            line.push('[');
            for (j, &v) in row.iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                let cell = match &self.levels[j] {
                    Some(levels) => serde_json::to_string(&levels[v as usize]),
                    None if v.is_finite() => serde_json::to_string(&v),
                    None => return Err(PredictError::Unencodable(v)),
                };
                line.push_str(&cell.map_err(|_| PredictError::Unencodable(v))?);
            }
            line.push(']');
        }
        line.push_str("]}");
        Ok(line)
    }
}

pub fn decode_reply(raw: &str, expected: usize) -> Result<Vec<f64>, PredictError> {
    let reply: Reply = serde_json::from_str(raw.trim_end())
        .map_err(|_| PredictError::MalformedReply { raw: raw.to_string() })?;
    if reply.predictions.len() != expected {
        return Err(PredictError::LengthMismatch {
            expected,
            got: reply.predictions.len(),
            raw: raw.to_string(),
        });
    }
    Ok(reply.predictions)
}

impl Predictor for ExternalPredictor {
    fn name(&self) -> String {
        format!("external({})", self.command)
    }

    fn predict(&self, rows: &FeatureRows) -> Result<Vec<f64>, PredictError> {
        let request = self.encode_request(rows)?;
        let mut pipe = self.pipe.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(pipe.stdin, "{request}").map_err(|e| match e.kind() {
            std::io::ErrorKind::BrokenPipe => PredictError::ProcessExited,
            _ => PredictError::Io(e),
        })?;
        pipe.stdin.flush()?;
        let mut reply = String::new();
        if pipe.stdout.read_line(&mut reply)? == 0 {
            return Err(PredictError::ProcessExited);
        }
        decode_reply(&reply, rows.nrows())
    }
}

impl Drop for ExternalPredictor {
    fn drop(&mut self) {
        let pipe = self.pipe.get_mut().unwrap_or_else(|e| e.into_inner());
        let _ = pipe.child.kill();
        let _ = pipe.child.wait();
    }
}

// --- metrics ---------------------------------------------------------------

/// Hold-out scores: `rmse`/`r2` on the modelling scale, `mae_orig` and
/// `mape_orig` (percent) on the original scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    /// `None` when the truth has zero variance.
    pub r2: Option<f64>,
    pub mae_orig: f64,
    pub mape_orig: f64,
    /// Rows left out of the MAPE because their original-scale truth is zero.
    pub mape_excluded: usize,
}

pub fn evaluate(truth: &[f64], pred: &[f64], response_is_log: bool) -> Result<Metrics, PredictError> {
    if truth.len() != pred.len() {
        return Err(PredictError::MetricInput(format!(
            "length mismatch {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    let n = truth.len();
    if n < 2 {
        return Err(PredictError::MetricInput("need at least two values".into()));
    }
    let nf = n as f64;
    let sse: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    let mean = truth.iter().sum::<f64>() / nf;
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let r2 = if sst > 0.0 {
        Some(1.0 - sse / sst)
    } else {
        log::warn!("truth has zero variance; r2 is undefined");
        None
    };

    let orig = |v: f64| if response_is_log { v.exp() } else { v };
    let mut abs_sum = 0.0;
    let mut pct_sum = 0.0;
    let mut pct_n = 0usize;
    for (&t, &p) in truth.iter().zip(pred) {
        let (t, p) = (orig(t), orig(p));
        abs_sum += (t - p).abs();
        if t != 0.0 {
            pct_sum += ((t - p) / t).abs();
            pct_n += 1;
        }
    }
    let mape_excluded = n - pct_n;
    if mape_excluded > 0 {
        log::warn!("{mape_excluded} row(s) with zero truth excluded from MAPE");
    }
    Ok(Metrics {
        rmse: (sse / nf).sqrt(),
        r2,
        mae_orig: abs_sum / nf,
        mape_orig: if pct_n > 0 { 100.0 * pct_sum / pct_n as f64 } else { 0.0 },
        mape_excluded,
    })
}
