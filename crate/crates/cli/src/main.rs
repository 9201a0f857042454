//! `spice`: ICE curves, spatially constrained curve clustering and figures
//! from the command line.
//!
//! Exit status: 0 on success, 1 when the configuration or inputs are
//! invalid, 2 when a stage fails at run time.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spice::clustgeo::{alpha_traces, AlphaReport, Partition, Weights};
use spice::config::{ConfigError, ConfigMap, PipelineConfig};
use spice::ice::{pd_curve, IceBundle};
use spice::pipeline::{self, ErrorKind, PipelineError, Stage};
use spice::render::{render_alpha_svg, render_ice_svg, render_spice_svg};

#[derive(Parser)]
#[command(name = "spice", version, about = "Spatially clustered ICE curves for black-box regression models")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write all artifacts.
    Pipeline(Settings),
    /// Fit the model and write sampled, smoothed ICE curves.
    Ice(Settings),
    /// Trace explained inertia over the alpha grid from persisted curves.
    ChooseAlpha {
        #[command(flatten)]
        settings: Settings,
        /// Smoothed curves written by `spice ice` (smooth.csv).
        #[arg(long)]
        curves: PathBuf,
    },
    /// Cluster persisted curves and write partitions and cluster curves.
    Cluster {
        #[command(flatten)]
        settings: Settings,
        /// Smoothed curves written by `spice ice` (smooth.csv).
        #[arg(long)]
        curves: PathBuf,
        /// Mixing parameter; when omitted the recommended value is used.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Render one figure from persisted artifacts.
    Plot(PlotArgs),
}

/// Flags overriding keys of the configuration file with the same names.
#[derive(Args, Clone, Default)]
struct Settings {
    /// Configuration file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    feature: Option<String>,
    #[arg(long, value_parser = ["knn", "linear", "external"])]
    predictor: Option<String>,
    #[arg(long)]
    external_cmd: Option<String>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Comma-separated values, or `a,b,...,c` for an evenly spaced grid.
    #[arg(long)]
    alpha_grid: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<String>,
    /// Any other configuration key, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Settings {
    fn config_map(&self) -> Result<ConfigMap, ConfigError> {
        let mut map = match &self.config {
            Some(path) => ConfigMap::load(path)?,
            None => ConfigMap::default(),
        };
        let flags = [
            ("data", self.data.clone()),
            ("feature", self.feature.clone()),
            ("predictor", self.predictor.clone()),
            ("external-cmd", self.external_cmd.clone()),
            ("k-min", self.k_min.map(|v| v.to_string())),
            ("k-max", self.k_max.map(|v| v.to_string())),
            ("alpha-grid", self.alpha_grid.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                map.set(key, &v);
            }
        }
        for pair in &self.set {
            map.set_pair(pair)?;
        }
        Ok(map)
    }

    fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let map = self.config_map().map_err(config_error)?;
        PipelineConfig::from_map(&map).map_err(config_error)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Ice,
    Spice,
    Alpha,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, value_enum)]
    kind: PlotKind,
    /// ice.csv, partition_K<k>.csv or alpha_K<k>.csv, depending on the kind.
    #[arg(long)]
    input: PathBuf,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
    /// sample.csv, to color ICE curves by response stratum.
    #[arg(long)]
    strata: Option<PathBuf>,
    /// spice_K<k>.csv with the cluster mean curves (spice plots).
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Axis label for the swept feature.
    #[arg(long, default_value = "feature")]
    label: String,
    /// Configuration naming the dataset, for coordinates (spice plots); the
    /// `config.txt` written next to the partition works.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: Option<String>,
}

fn config_error(e: ConfigError) -> PipelineError {
    PipelineError::new(Stage::Config, ErrorKind::Validation, e)
}

fn open_input(stage: Stage, path: &Path) -> Result<BufReader<File>, PipelineError> {
    File::open(path).map(BufReader::new).map_err(|e| {
        PipelineError::new(stage, ErrorKind::Validation, format!("cannot open {}: {e}", path.display()))
    })
}

fn bad_input(stage: Stage) -> impl FnOnce(String) -> PipelineError {
    move |e| PipelineError::new(stage, ErrorKind::Validation, e)
}

fn run_pipeline(settings: &Settings) -> Result<(), PipelineError> {
    let config = settings.resolve()?;
    let outcome = pipeline::run_pipeline(&config)?;
    println!(
        "wrote {} artifacts to {} (alpha = {}, K = {}..={})",
        outcome.manifest.artifacts.len(),
        outcome.out.display(),
        outcome.cluster.alpha,
        config.k_min,
        config.k_max
    );
    Ok(())
}

fn run_ice(settings: &Settings) -> Result<(), PipelineError> {
    let config = settings.resolve()?;
    let mut dir = pipeline::open_output(&config)?;
    let prepared = pipeline::prepare(&config)?;
    let curves = pipeline::compute_curves(&config, &prepared)?;
    pipeline::write_config(&mut dir, &config)?;
    pipeline::write_curve_artifacts(&mut dir, &prepared, &curves)?;
    let manifest = dir.finish(config.echo()).map_err(|e| PipelineError::new(Stage::Write, ErrorKind::Runtime, e))?;
    println!("wrote {} artifacts ({} curves)", manifest.artifacts.len(), curves.bundle.len());
    Ok(())
}

struct Loaded {
    config: PipelineConfig,
    ids: Vec<usize>,
    coords: Vec<(f64, f64)>,
    curves: Vec<spice::smoothing::SmoothCurve>,
}

fn load_persisted(settings: &Settings, curves: &Path) -> Result<Loaded, PipelineError> {
    let config = settings.resolve()?;
    let persisted = pipeline::read_persisted_curves(&config, curves)?;
    let dataset = pipeline::load_filtered(&config)?;
    let coords = pipeline::coordinates_of(&dataset, &persisted.ids)?;
    Ok(Loaded { config, ids: persisted.ids, coords, curves: persisted.curves })
}

fn run_choose_alpha(settings: &Settings, curves: &Path) -> Result<(), PipelineError> {
    let loaded = load_persisted(settings, curves)?;
    let config = &loaded.config;
    let mut dir = pipeline::open_output(config)?;
    let (d0, d1) = pipeline::dissimilarities(config, &loaded.curves, &loaded.coords)?;
    if config.k_max > d0.len() {
        return Err(bad_input(Stage::ChooseAlpha)(format!("k-max exceeds the {} curves", d0.len())));
    }
    let reports = alpha_traces(&d0, &d1, &Weights::uniform(d0.len()), &config.cluster_counts(), &config.alpha_grid)
        .map_err(|e| PipelineError::new(Stage::ChooseAlpha, ErrorKind::Runtime, e))?;
    pipeline::write_config(&mut dir, config)?;
    pipeline::write_alpha_artifacts(&mut dir, &reports)?;
    dir.finish(config.echo()).map_err(|e| PipelineError::new(Stage::Write, ErrorKind::Runtime, e))?;
    for r in &reports {
        println!("K = {}: recommended alpha = {}", r.k, r.recommended);
    }
    Ok(())
}

fn run_cluster(settings: &Settings, curves: &Path, alpha: Option<f64>) -> Result<(), PipelineError> {
    let mut settings = settings.clone();
    if let Some(a) = alpha {
        settings.set.push(format!("cluster.alpha={a}"));
    }
    let loaded = load_persisted(&settings, curves)?;
    let config = &loaded.config;
    let mut dir = pipeline::open_output(config)?;
    let (d0, d1) = pipeline::dissimilarities(config, &loaded.curves, &loaded.coords)?;
    let stage = pipeline::cluster_stage(config, &d0, &d1, &loaded.curves)?;
    pipeline::write_config(&mut dir, config)?;
    pipeline::write_cluster_artifacts(&mut dir, &stage, &loaded.ids, &loaded.coords, &config.feature)?;
    dir.finish(config.echo()).map_err(|e| PipelineError::new(Stage::Write, ErrorKind::Runtime, e))?;
    println!("clustered {} curves at alpha = {}", loaded.ids.len(), stage.alpha);
    Ok(())
}

fn run_plot(args: &PlotArgs) -> Result<(), PipelineError> {
    let render = |e: spice::render::RenderError| PipelineError::new(Stage::Render, ErrorKind::Validation, e);
    let svg = match args.kind {
        PlotKind::Ice => {
            let bundle = IceBundle::read_csv(open_input(Stage::Load, &args.input)?, &args.label)
                .map_err(|e| bad_input(Stage::Load)(e.to_string()))?;
            let pd = pd_curve(&bundle).map_err(|e| bad_input(Stage::Load)(e.to_string()))?;
            let strata = match &args.strata {
                None => None,
                Some(path) => {
                    let (ids, strata) = pipeline::read_sample(open_input(Stage::Load, path)?)
                        .map_err(bad_input(Stage::Load))?;
                    if ids != bundle.ids() {
                        return Err(bad_input(Stage::Load)("sample ids do not match the ICE curves".into()));
                    }
                    Some(strata)
                }
            };
            render_ice_svg(&bundle, &pd, strata.as_deref()).map_err(render)?
        }
        PlotKind::Alpha => {
            let k = args
                .input
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.rsplit_once("_K"))
                .and_then(|(_, k)| k.parse().ok())
                .unwrap_or(0);
            let report = AlphaReport::read_csv(open_input(Stage::Load, &args.input)?, k)
                .map_err(|e| bad_input(Stage::Load)(e.to_string()))?;
            render_alpha_svg(&report).map_err(render)?
        }
        PlotKind::Spice => {
            let (ids, partition): (Vec<usize>, Partition) = Partition::read_csv(open_input(Stage::Load, &args.input)?)
                .map_err(|e| bad_input(Stage::Load)(e.to_string()))?;
            let curves_path = args
                .curves
                .as_ref()
                .ok_or_else(|| bad_input(Stage::Config)("spice plots need --curves".into()))?;
            let curves = pipeline::read_cluster_curves(open_input(Stage::Load, curves_path)?)
                .map_err(bad_input(Stage::Load))?;
            let settings = Settings {
                config: args.config.clone(),
                data: args.data.clone(),
                set: args.set.clone(),
                ..Settings::default()
            };
            let config = settings.resolve()?;
            let dataset = pipeline::load_filtered(&config)?;
            let coords = pipeline::coordinates_of(&dataset, &ids)?;
            render_spice_svg(&partition, &curves, &coords, &args.label).map_err(render)?
        }
    };
    std::fs::write(&args.out, svg).map_err(|e| {
        PipelineError::new(Stage::Write, ErrorKind::Runtime, format!("cannot write {}: {e}", args.out.display()))
    })?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match &cli.command {
        Command::Pipeline(s) => run_pipeline(s),
        Command::Ice(s) => run_ice(s),
        Command::ChooseAlpha { settings, curves } => run_choose_alpha(settings, curves),
        Command::Cluster { settings, curves, alpha } => run_cluster(settings, curves, *alpha),
        Command::Plot(args) => run_plot(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e).and_then(std::error::Error::source);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
