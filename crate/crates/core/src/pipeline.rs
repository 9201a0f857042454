//! End-to-end orchestration: data → predictor → ICE → smoothing →
//! dissimilarities → mixing selection → clustering → artifacts.
//!
//! Each stage is a public function so the command-line tool can re-run
//! stages from persisted intermediate files.

use std::error::Error as StdError;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::clustgeo::{
    alpha_traces, cut, spice_curves, ward_cluster, AlphaReport, Dendrogram, Partition, Weights,
};
use crate::config::{PipelineConfig, PredictorChoice, DEFAULT_SAMPLE_TOTAL};
use crate::data::{build_grid, load_dataset, split_indices, stratified_sample, DataError, Dataset, StratifiedSample};
use crate::fdmetrics::{curve_dissimilarity_matrix, normalize, spatial_dissimilarity_matrix, DissimilarityMatrix};
use crate::ice::{ice_curves, pd_curve, IceBundle};
use crate::manifest::{ArtifactDir, Manifest};
use crate::predictor::{
    evaluate, external_predictor_from_command_line, knn_fit, linear_fit, Metrics, PredictError, Predictor,
};
use crate::render::{render_alpha_svg, render_ice_svg, render_spice_svg};
use crate::smoothing::{default_bandwidth, smooth_bundle, SmoothCurve, DEFAULT_BANDWIDTH_FRACTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Split,
    Fit,
    Evaluate,
    Sample,
    Grid,
    Ice,
    Smooth,
    Distances,
    ChooseAlpha,
    Cluster,
    Summarize,
    Render,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Split => "split",
            Stage::Fit => "fit",
            Stage::Evaluate => "evaluate",
            Stage::Sample => "sample",
            Stage::Grid => "grid",
            Stage::Ice => "ice",
            Stage::Smooth => "smooth",
            Stage::Distances => "distances",
            Stage::ChooseAlpha => "choose-alpha",
            Stage::Cluster => "cluster",
            Stage::Summarize => "summarize",
            Stage::Render => "render",
            Stage::Write => "write",
        })
    }
}

/// Whether the failure traces back to the user's inputs or happened while
/// computing with valid inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: ErrorKind,
    #[source]
    pub source: Box<dyn StdError + Send + Sync>,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: ErrorKind, source: impl Into<Box<dyn StdError + Send + Sync>>) -> Self {
        PipelineError { stage, kind, source: source.into() }
    }

    pub fn is_validation(&self) -> bool {
        self.kind == ErrorKind::Validation
    }
}

fn validation<E: Into<Box<dyn StdError + Send + Sync>>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::new(stage, ErrorKind::Validation, e)
}

fn runtime<E: Into<Box<dyn StdError + Send + Sync>>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::new(stage, ErrorKind::Runtime, e)
}

/// Loaded data, the fitted model and its hold-out scores.
pub struct Prepared {
    pub dataset: Dataset,
    pub predictor: Box<dyn Predictor>,
    pub metrics: Option<Metrics>,
    pub train_rows: usize,
    pub test_rows: usize,
}

pub fn load_filtered(config: &PipelineConfig) -> Result<Dataset, PipelineError> {
    let mut dataset = load_dataset(&config.data, &config.schema).map_err(validation(Stage::Load))?;
    for f in &config.filters {
        dataset = dataset.retain_in_range(&f.column, f.min, f.max).map_err(validation(Stage::Load))?;
    }
    if dataset.len() < 2 {
        return Err(validation(Stage::Load)(DataError::TooFewRows { needed: 2, n: dataset.len() }));
    }
    log::info!("loaded {} rows from {}", dataset.len(), config.data.display());
    Ok(dataset)
}

fn fit(choice: &PredictorChoice, train: &Dataset) -> Result<Box<dyn Predictor>, PipelineError> {
    let classify = |e: PredictError| {
        let kind = match e {
            PredictError::EmptyTraining | PredictError::BadK { .. } | PredictError::EmptyCommand => {
                ErrorKind::Validation
            }
            _ => ErrorKind::Runtime,
        };
        PipelineError::new(Stage::Fit, kind, e)
    };
    Ok(match choice {
        PredictorChoice::Knn { k } => Box::new(knn_fit(train, *k).map_err(classify)?),
        PredictorChoice::Linear => Box::new(linear_fit(train).map_err(classify)?),
        PredictorChoice::External { command } => {
            Box::new(external_predictor_from_command_line(command, train.schema().features()).map_err(classify)?)
        }
    })
}

/// Loads and filters the data, splits it when configured, fits the model on
/// the training side and scores it on the held-out side.
pub fn prepare(config: &PipelineConfig) -> Result<Prepared, PipelineError> {
    let dataset = load_filtered(config)?;
    let Some(fraction) = config.train_fraction else {
        let predictor = fit(&config.predictor, &dataset)?;
        let n = dataset.len();
        return Ok(Prepared { dataset, predictor, metrics: None, train_rows: n, test_rows: 0 });
    };
    let (train_idx, test_idx) =
        split_indices(dataset.len(), fraction, config.seed).map_err(validation(Stage::Split))?;
    let train = dataset.select(&train_idx).map_err(runtime(Stage::Split))?;
    let predictor = fit(&config.predictor, &train)?;
    log::info!("fitted {} on {} rows", predictor.name(), train.len());
    let test = dataset.select(&test_idx).map_err(runtime(Stage::Split))?;
    let metrics = if test.len() >= 2 {
        let pred = predictor.predict(&test.all_rows()).map_err(runtime(Stage::Evaluate))?;
        Some(evaluate(test.response(), &pred, config.log_response).map_err(runtime(Stage::Evaluate))?)
    } else {
        log::warn!("hold-out set has {} row(s); skipping evaluation", test.len());
        None
    };
    Ok(Prepared { dataset, predictor, metrics, train_rows: train_idx.len(), test_rows: test_idx.len() })
}

/// Sampled ICE curves, their mean and smoothed versions.
pub struct CurveStage {
    pub sample: StratifiedSample,
    pub bundle: IceBundle,
    pub pd: Vec<f64>,
    pub smoothed: Vec<SmoothCurve>,
    pub bandwidth: f64,
}

pub fn compute_curves(config: &PipelineConfig, prepared: &Prepared) -> Result<CurveStage, PipelineError> {
    let dataset = &prepared.dataset;
    let total = config.sample_total.unwrap_or(DEFAULT_SAMPLE_TOTAL.min(dataset.len()));
    let sample =
        stratified_sample(dataset, config.strata, total, config.seed).map_err(validation(Stage::Sample))?;
    let grid = build_grid(dataset, &config.feature, config.grid_size, config.grid_strategy)
        .map_err(validation(Stage::Grid))?;
    log::info!("computing {} ICE curves over {} grid points", sample.indices.len(), grid.len());
    let bundle = ice_curves(prepared.predictor.as_ref(), dataset, &config.feature, &grid, &sample.indices)
        .map_err(runtime(Stage::Ice))?;
    let pd = pd_curve(&bundle).map_err(runtime(Stage::Ice))?;
    let bandwidth = config.bandwidth.unwrap_or_else(|| default_bandwidth(&grid));
    let smoothed = smooth_bundle(&bundle, bandwidth, config.dense_size).map_err(runtime(Stage::Smooth))?;
    Ok(CurveStage { sample, bundle, pd, smoothed, bandwidth })
}

/// Normalized curve and spatial dissimilarities for the sampled rows.
pub fn dissimilarities(
    config: &PipelineConfig,
    curves: &[SmoothCurve],
    coords: &[(f64, f64)],
) -> Result<(DissimilarityMatrix, DissimilarityMatrix), PipelineError> {
    let d0 = curve_dissimilarity_matrix(curves).map_err(runtime(Stage::Distances))?;
    let d1 = spatial_dissimilarity_matrix(coords, config.spatial_metric).map_err(validation(Stage::Distances))?;
    Ok((
        normalize(&d0).map_err(runtime(Stage::Distances))?,
        normalize(&d1).map_err(validation(Stage::Distances))?,
    ))
}

pub struct ClusterStage {
    pub reports: Vec<AlphaReport>,
    pub alpha: f64,
    pub alpha_configured: bool,
    pub dendrogram: Dendrogram,
    /// `(K, partition, cluster mean curves)` for each K in the configured range.
    pub partitions: Vec<(usize, Partition, Vec<SmoothCurve>)>,
}

fn check_cluster_range(config: &PipelineConfig, n: usize) -> Result<(), PipelineError> {
    if config.k_max > n {
        return Err(validation(Stage::Cluster)(format!(
            "k-max = {} exceeds the {n} sampled observations",
            config.k_max
        )));
    }
    Ok(())
}

/// Traces `Q_0`/`Q_1` for every K, picks the mixing value (configured or
/// recommended at the final K), clusters once at that value and cuts at
/// every K.
pub fn cluster_stage(
    config: &PipelineConfig,
    d0: &DissimilarityMatrix,
    d1: &DissimilarityMatrix,
    curves: &[SmoothCurve],
) -> Result<ClusterStage, PipelineError> {
    let n = d0.len();
    check_cluster_range(config, n)?;
    let weights = Weights::uniform(n);
    let ks = config.cluster_counts();
    let reports = alpha_traces(d0, d1, &weights, &ks, &config.alpha_grid).map_err(runtime(Stage::ChooseAlpha))?;
    let recommended = reports.iter().find(|r| r.k == config.final_k).expect("final K is in range").recommended;
    let alpha = config.alpha.unwrap_or(recommended);
    log::info!("mixing parameter {alpha} (recommended {recommended} at K = {})", config.final_k);
    let dendrogram = ward_cluster(d0, d1, alpha, &weights).map_err(runtime(Stage::Cluster))?;
    let partitions = ks
        .iter()
        .map(|&k| {
            let p = cut(&dendrogram, k).map_err(runtime(Stage::Cluster))?;
            let means = spice_curves(&p, curves, &weights).map_err(runtime(Stage::Summarize))?;
            Ok((k, p, means))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(ClusterStage { reports, alpha, alpha_configured: config.alpha.is_some(), dendrogram, partitions })
}

// --- artifact formats -------------------------------------------------------

pub fn write_metrics<W: Write>(prepared: &Prepared, mut w: W) -> io::Result<()> {
    writeln!(w, "predictor = {}", prepared.predictor.name())?;
    writeln!(w, "train_rows = {}", prepared.train_rows)?;
    writeln!(w, "test_rows = {}", prepared.test_rows)?;
    if let Some(m) = &prepared.metrics {
        writeln!(w, "rmse = {}", m.rmse)?;
        match m.r2 {
            Some(r2) => writeln!(w, "r2 = {r2}")?,
            None => writeln!(w, "r2 = undefined")?,
        }
        writeln!(w, "mae_orig = {}", m.mae_orig)?;
        writeln!(w, "mape_orig = {}", m.mape_orig)?;
        writeln!(w, "mape_excluded = {}", m.mape_excluded)?;
    }
    w.flush()
}

pub fn write_sample<W: Write>(sample: &StratifiedSample, mut w: W) -> io::Result<()> {
    writeln!(w, "id,stratum")?;
    for (id, s) in sample.indices.iter().zip(&sample.strata) {
        writeln!(w, "{id},{}", s + 1)?;
    }
    w.flush()
}

/// Reads `id,stratum` lines back as `(ids, 0-based strata)`.
pub fn read_sample<R: BufRead>(reader: R) -> Result<(Vec<usize>, Vec<usize>), String> {
    let mut ids = Vec::new();
    let mut strata = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = || format!("sample line {}: `{line}`", i + 1);
        let (id, s) = line.split_once(',').ok_or_else(bad)?;
        ids.push(id.trim().parse().map_err(|_| bad())?);
        let s: usize = s.trim().parse().map_err(|_| bad())?;
        strata.push(s.checked_sub(1).ok_or_else(bad)?);
    }
    Ok((ids, strata))
}

pub fn write_pd<W: Write>(grid: &[f64], pd: &[f64], mut w: W) -> io::Result<()> {
    writeln!(w, "grid_value,prediction")?;
    for (x, y) in grid.iter().zip(pd) {
        writeln!(w, "{x},{y}")?;
    }
    w.flush()
}

/// Writes `cluster,grid_value,prediction,derivative` with 1-based clusters.
pub fn write_cluster_curves<W: Write>(curves: &[SmoothCurve], mut w: W) -> io::Result<()> {
    writeln!(w, "cluster,grid_value,prediction,derivative")?;
    for (label, c) in curves.iter().enumerate() {
        for ((t, v), d) in c.grid().iter().zip(&c.values).zip(&c.derivative) {
            writeln!(w, "{},{t},{v},{d}", label + 1)?;
        }
    }
    w.flush()
}

pub fn read_cluster_curves<R: BufRead>(reader: R) -> Result<Vec<SmoothCurve>, String> {
    let mut text = String::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if i == 0 {
            if line.trim() != "cluster,grid_value,prediction,derivative" {
                return Err(format!("unexpected cluster curve header `{line}`"));
            }
            text.push_str("id,grid_value,prediction,derivative\n");
        } else {
            text.push_str(&line);
            text.push('\n');
        }
    }
    let mut curves = crate::smoothing::read_smooth_csv(text.as_bytes(), 1.0).map_err(|e| e.to_string())?;
    for (k, c) in curves.iter_mut().enumerate() {
        if c.id != k + 1 {
            return Err(format!("clusters must be numbered 1.. in order; found {} at position {}", c.id, k + 1));
        }
        c.id = k;
    }
    Ok(curves)
}

/// Bandwidth implied by the configuration for curves on `grid`.
pub fn implied_bandwidth(config: &PipelineConfig, grid: &[f64]) -> f64 {
    config.bandwidth.unwrap_or(DEFAULT_BANDWIDTH_FRACTION * (grid[grid.len() - 1] - grid[0]))
}

/// Rows of `dataset` named by `ids`, as `(lat, lon)`.
pub fn coordinates_of(dataset: &Dataset, ids: &[usize]) -> Result<Vec<(f64, f64)>, PipelineError> {
    let (lat, lon) = (dataset.latitude(), dataset.longitude());
    ids.iter()
        .map(|&i| {
            if i >= dataset.len() {
                Err(validation(Stage::Load)(DataError::RowOutOfRange { index: i, n: dataset.len() }))
            } else {
                Ok((lat[i], lon[i]))
            }
        })
        .collect()
}

fn write_err(e: crate::manifest::ManifestError) -> PipelineError {
    let kind = match e {
        crate::manifest::ManifestError::Occupied(_) => ErrorKind::Validation,
        _ => ErrorKind::Runtime,
    };
    PipelineError::new(Stage::Write, kind, e)
}

fn render_err(e: crate::render::RenderError) -> PipelineError {
    runtime(Stage::Render)(e)
}

pub fn open_output(config: &PipelineConfig) -> Result<ArtifactDir, PipelineError> {
    let out = config.out.as_ref().ok_or_else(|| validation(Stage::Config)("missing required key `out`"))?;
    ArtifactDir::create(out).map_err(write_err)
}

pub fn write_config(dir: &mut ArtifactDir, config: &PipelineConfig) -> Result<(), PipelineError> {
    dir.write("config.txt", |w| {
        for (k, v) in config.echo() {
            writeln!(w, "{k} = {v}")?;
        }
        Ok(())
    })
    .map_err(write_err)
}

pub fn write_curve_artifacts(
    dir: &mut ArtifactDir,
    prepared: &Prepared,
    curves: &CurveStage,
) -> Result<(), PipelineError> {
    if prepared.metrics.is_some() {
        dir.write("metrics.txt", |w| write_metrics(prepared, w)).map_err(write_err)?;
    }
    dir.write("sample.csv", |w| write_sample(&curves.sample, w)).map_err(write_err)?;
    dir.write("ice.csv", |w| curves.bundle.write_csv(w)).map_err(write_err)?;
    dir.write("pd.csv", |w| write_pd(curves.bundle.grid().values(), &curves.pd, w)).map_err(write_err)?;
    dir.write("smooth.csv", |w| crate::smoothing::write_smooth_csv(&curves.smoothed, w)).map_err(write_err)?;
    let svg = render_ice_svg(&curves.bundle, &curves.pd, Some(&curves.sample.strata)).map_err(render_err)?;
    dir.write_bytes("ice.svg", svg.as_bytes()).map_err(write_err)
}

pub fn write_matrices(
    dir: &mut ArtifactDir,
    d0: &DissimilarityMatrix,
    d1: &DissimilarityMatrix,
) -> Result<(), PipelineError> {
    dir.write("d0.txt", |w| d0.write_text(w)).map_err(write_err)?;
    dir.write("d1.txt", |w| d1.write_text(w)).map_err(write_err)
}

pub fn write_alpha_artifacts(dir: &mut ArtifactDir, reports: &[AlphaReport]) -> Result<(), PipelineError> {
    for r in reports {
        dir.write(&format!("alpha_K{}.csv", r.k), |w| r.write_csv(w)).map_err(write_err)?;
        let svg = render_alpha_svg(r).map_err(render_err)?;
        dir.write_bytes(&format!("alpha_K{}.svg", r.k), svg.as_bytes()).map_err(write_err)?;
    }
    Ok(())
}

pub fn write_cluster_artifacts(
    dir: &mut ArtifactDir,
    stage: &ClusterStage,
    ids: &[usize],
    coords: &[(f64, f64)],
    feature: &str,
) -> Result<(), PipelineError> {
    dir.write("selection.txt", |w| {
        writeln!(w, "alpha = {}", stage.alpha)?;
        writeln!(w, "alpha_source = {}", if stage.alpha_configured { "configured" } else { "recommended" })?;
        for r in &stage.reports {
            writeln!(w, "recommended_K{} = {}", r.k, r.recommended)?;
        }
        Ok(())
    })
    .map_err(write_err)?;
    dir.write("dendrogram.csv", |w| stage.dendrogram.write_csv(w)).map_err(write_err)?;
    for (k, p, means) in &stage.partitions {
        dir.write(&format!("partition_K{k}.csv"), |w| p.write_csv(ids, w)).map_err(write_err)?;
        dir.write(&format!("spice_K{k}.csv"), |w| write_cluster_curves(means, w)).map_err(write_err)?;
        let svg = render_spice_svg(p, means, coords, feature).map_err(render_err)?;
        dir.write_bytes(&format!("spice_K{k}.svg"), svg.as_bytes()).map_err(write_err)?;
    }
    Ok(())
}

pub struct PipelineOutcome {
    pub out: PathBuf,
    pub manifest: Manifest,
    pub metrics: Option<Metrics>,
    pub sample_ids: Vec<usize>,
    pub cluster: ClusterStage,
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome, PipelineError> {
    let mut dir = open_output(config)?;
    let prepared = prepare(config)?;
    let curves = compute_curves(config, &prepared)?;
    let ids = curves.sample.indices.clone();
    let coords = coordinates_of(&prepared.dataset, &ids)?;
    check_cluster_range(config, ids.len())?;
    let (d0, d1) = dissimilarities(config, &curves.smoothed, &coords)?;
    let cluster = cluster_stage(config, &d0, &d1, &curves.smoothed)?;

    write_config(&mut dir, config)?;
    write_curve_artifacts(&mut dir, &prepared, &curves)?;
    if config.matrices.enabled(ids.len()) {
        write_matrices(&mut dir, &d0, &d1)?;
    }
    write_alpha_artifacts(&mut dir, &cluster.reports)?;
    write_cluster_artifacts(&mut dir, &cluster, &ids, &coords, &config.feature)?;
    let manifest = dir.finish(config.echo()).map_err(write_err)?;
    Ok(PipelineOutcome {
        out: config.out.clone().expect("checked by open_output"),
        manifest,
        metrics: prepared.metrics,
        sample_ids: ids,
        cluster,
    })
}

/// Curves persisted by the ICE stage, with the dataset rows they belong to.
pub struct PersistedCurves {
    pub ids: Vec<usize>,
    pub curves: Vec<SmoothCurve>,
}

pub fn read_persisted_curves(config: &PipelineConfig, path: &Path) -> Result<PersistedCurves, PipelineError> {
    let file = std::fs::File::open(path).map_err(validation(Stage::Load))?;
    let mut curves = crate::smoothing::read_smooth_csv(io::BufReader::new(file), 1.0)
        .map_err(validation(Stage::Load))?;
    // The file does not record the bandwidth; recover it from the settings.
    let h = implied_bandwidth(config, curves[0].grid());
    for c in &mut curves {
        c.bandwidth = h;
    }
    let ids = curves.iter().map(|c| c.id).collect();
    Ok(PersistedCurves { ids, curves })
}

