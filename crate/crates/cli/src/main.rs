use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use diseasemap::dataprep::{self, CovariateHistory, WeeksMode};
use diseasemap::geometry::{read_geojson, to_feature_collection};
use diseasemap::geostat::{self, KrigeConfig};
use diseasemap::graph::{adjacency_from_polygons, build_adjacency, read_neighbor_pairs, write_neighbor_pairs};
use diseasemap::graph::{Region, RegionSet};
use diseasemap::inference::{self, compare_models, FitSummary, PosteriorSamples, SamplerConfig};
use diseasemap::model::{build_model, FixedEffectPrior, ModelOptions, ModelSpec};
use diseasemap::risk::{self, Centre, RelativeRiskSurface};
use diseasemap::synth;

#[derive(Parser)]
#[command(name = "diseasemap", version, about = "Bayesian spatio-temporal disease mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Interpolate station measurements onto regions by ordinary kriging.
    Krige(KrigeArgs),
    /// Build the model-ready panel from cases and kriged covariates.
    Prepare(PrepareArgs),
    /// Fit one model by MCMC.
    Fit(FitArgs),
    /// Rank fitted models by DIC.
    Compare(CompareArgs),
    /// Export relative-risk surfaces from a fit.
    Report(ReportArgs),
    /// Write a synthetic lattice data set (regions, shapes, neighbours,
    /// stations and cases).
    Simulate(SimulateArgs),
}

#[derive(clap::Args)]
struct KrigeArgs {
    /// Station observations `station_id,x_km,y_km,day,variable,value`.
    #[arg(long)]
    stations: PathBuf,
    /// Regions `id,name,population[,area_km2]`.
    #[arg(long)]
    regions: PathBuf,
    /// Region polygons (GeoJSON, projected km coordinates).
    #[arg(long)]
    shapes: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    spacing_km: f64,
    #[arg(long, default_value_t = 5)]
    min_stations: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PrepareArgs {
    #[arg(long)]
    regions: PathBuf,
    /// Daily cases `region_id,date,cases`.
    #[arg(long)]
    cases: PathBuf,
    /// Kriged values `region_id,day,variable,value,flag`.
    #[arg(long)]
    values: PathBuf,
    /// Polygons for population density; falls back to `area_km2`.
    #[arg(long)]
    shapes: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    lag: u32,
    /// Drop leading days whose lagged covariates are unavailable.
    #[arg(long)]
    trim: bool,
    #[arg(long, default_value_t = 1)]
    degree: u8,
    #[arg(long, default_value = "ceil7")]
    weeks: WeeksMode,
    #[arg(long)]
    out: PathBuf,
    /// Also write the contiguity graph derived from `--shapes`.
    #[arg(long, requires = "shapes")]
    neighbours_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct FitArgs {
    #[arg(long)]
    model: u8,
    #[arg(long, default_value_t = 0)]
    lag: u32,
    #[arg(long, default_value_t = 1)]
    degree: u8,
    #[arg(long)]
    panel: PathBuf,
    /// Neighbour pairs `id_a,id_b`.
    #[arg(long)]
    graph: PathBuf,
    /// TOML file with a `[sampler]` table and optional `fixed_effect_variance`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    fits: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Temporal,
    Spatial,
    St,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Geojson,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, value_enum)]
    what: What,
    /// Comma-separated day numbers for `st`; defaults to every 14th day.
    #[arg(long, value_delimiter = ',')]
    days: Vec<i32>,
    #[arg(long, default_value_t = 0.75)]
    loess_span: f64,
    #[arg(long, default_value_t = 2)]
    loess_degree: usize,
    /// Report posterior medians instead of means in `rr_mean`.
    #[arg(long)]
    median: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Polygons, required for GeoJSON output.
    #[arg(long)]
    shapes: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 2)]
    rows: usize,
    #[arg(long, default_value_t = 5)]
    cols: usize,
    #[arg(long, default_value_t = 56)]
    days: usize,
    #[arg(long, default_value_t = 25)]
    stations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    #[serde(default)]
    sampler: SamplerConfig,
    /// Normal prior variance for the fixed effects; flat when absent.
    fixed_effect_variance: Option<f64>,
}

/// Inputs recorded with the samples so `report` can rebuild the model.
#[derive(Debug, Serialize, Deserialize)]
struct FitInputs {
    panel: PathBuf,
    graph: PathBuf,
    fixed_prior: FixedEffectPrior,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Krige(a) => krige(a),
        Command::Prepare(a) => prepare(a),
        Command::Fit(a) => fit(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn krige(a: KrigeArgs) -> Result<()> {
    let stations = geostat::read_station_csv(&a.stations).context("reading stations")?;
    let regions = RegionSet::read_csv(&a.regions).context("reading regions")?;
    let shapes = read_geojson(&a.shapes).context("reading shapes")?;
    let config = KrigeConfig {
        spacing_km: a.spacing_km,
        min_stations: a.min_stations,
        ..KrigeConfig::default()
    };
    let values = geostat::krige_regions(&stations, &regions, &shapes, &config)?;
    geostat::write_region_values_csv(&a.out, &values)?;
    info!("wrote {} region-day values to {}", values.len(), a.out.display());
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let regions = RegionSet::read_csv(&a.regions).context("reading regions")?;
    let cases = dataprep::read_cases_csv(&a.cases).context("reading cases")?;
    let values = geostat::read_region_values_csv(&a.values).context("reading kriged values")?;
    let shapes = a
        .shapes
        .as_ref()
        .map(read_geojson)
        .transpose()
        .context("reading shapes")?;
    let history = CovariateHistory::from_region_values(&regions, &values)?;
    let density = dataprep::population_density(&regions, shapes.as_deref())?;
    let panel = dataprep::build_panel(&regions, &cases, history, &density, a.weeks)?;
    let panel = dataprep::lag_covariates(&panel, a.lag, a.trim)?;
    let panel = dataprep::standardize(&panel)?;
    let panel = dataprep::polynomial_expand(&panel, a.degree)?;
    info!(
        "panel: {} regions x {} days (lag {}, {} leading days trimmed), offset identity error {:.2e}",
        panel.n_regions(),
        panel.n_days(),
        panel.lag_days,
        panel.trimmed_days,
        panel.offset_identity_error()
    );
    dataprep::write_panel_csv(&a.out, &panel)?;
    if let (Some(path), Some(shapes)) = (&a.neighbours_out, &shapes) {
        let graph = adjacency_from_polygons(&regions, shapes, 1e-6)?;
        write_neighbor_pairs(path, &regions, &graph)?;
    }
    Ok(())
}

/// Region set implied by a panel (ids and populations).
fn panel_regions(panel: &dataprep::Panel) -> Result<RegionSet> {
    Ok(RegionSet::new(
        panel
            .region_ids
            .iter()
            .zip(&panel.populations)
            .map(|(id, p)| Region {
                id: id.clone(),
                name: id.clone(),
                population: *p,
                area_km2: None,
            })
            .collect(),
    )?)
}

fn load_spec(
    panel_path: &Path,
    graph_path: &Path,
    model: u8,
    options: &ModelOptions,
) -> Result<(ModelSpec, dataprep::Panel)> {
    let panel = dataprep::read_panel_csv(panel_path).with_context(|| format!("reading {}", panel_path.display()))?;
    let regions = panel_regions(&panel)?;
    let pairs = read_neighbor_pairs(graph_path).with_context(|| format!("reading {}", graph_path.display()))?;
    let graph = build_adjacency(&regions, &pairs)?;
    let spec = build_model(model, &panel, &graph, options)?;
    Ok((spec, panel))
}

fn fit(a: FitArgs) -> Result<()> {
    let cfg: FitConfig = match &a.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => FitConfig::default(),
    };
    let mut sampler = cfg.sampler;
    if let Some(seed) = a.seed {
        sampler.seed = seed;
    }
    let fixed_prior = match cfg.fixed_effect_variance {
        Some(variance) => FixedEffectPrior::Normal { variance },
        None => FixedEffectPrior::Flat,
    };
    let options = ModelOptions {
        lag_days: a.lag,
        poly_degree: a.degree,
        fixed_prior,
    };
    let (spec, panel) = load_spec(&a.panel, &a.graph, a.model, &options)?;
    info!("fitting {spec}");
    let samples = inference::fit_mcmc(&spec, &panel, &sampler)?;
    let summary = FitSummary::new(&samples, &spec, &panel)?;
    let inputs = FitInputs {
        panel: std::path::absolute(&a.panel)?,
        graph: std::path::absolute(&a.graph)?,
        fixed_prior,
    };
    samples.save(&a.out, serde_json::to_value(&inputs)?)?;
    summary.save(a.out.join("summary.json"))?;
    info!(
        "model {}: DIC {:.2}, pD {:.2}{}",
        spec.model_id,
        summary.dic.dic,
        summary.dic.p_d,
        if summary.flags.is_empty() {
            String::new()
        } else {
            format!(" (flags: {})", summary.flags.join(", "))
        }
    );
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let fits = a
        .fits
        .iter()
        .map(|d| FitSummary::load(d.join("summary.json")).with_context(|| format!("reading fit {}", d.display())))
        .collect::<Result<Vec<_>>>()?;
    let rows = compare_models(&fits);
    inference::write_comparison_csv(&a.out, &rows)?;
    for r in &rows {
        info!(
            "{} model {} lag {}: DIC {:.2} pD {:.2} {}",
            r.rank.map(|k| format!("#{k}")).unwrap_or_else(|| "-".into()),
            r.model_id,
            r.lag_days,
            r.dic,
            r.p_d,
            r.flags.join(";")
        );
    }
    Ok(())
}

/// `path` with `suffix` appended to the file stem.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}{suffix}.{ext}"),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn write_surface(surface: &RelativeRiskSurface, format: Format, shapes: Option<&PathBuf>, out: &Path) -> Result<()> {
    match format {
        Format::Csv => risk::write_surface_csv(out, surface)?,
        Format::Geojson => {
            let path = shapes.context("GeoJSON output needs --shapes")?;
            risk::write_surface_geojson(out, surface, &read_geojson(path)?)?;
        }
    }
    info!(
        "wrote {} rows of {} to {}",
        surface.rows.len(),
        surface.effect,
        out.display()
    );
    Ok(())
}

fn write_smoothed(surface: &RelativeRiskSurface, span: f64, degree: usize, out: &Path) -> Result<()> {
    let smooth = surface.smooth(span, degree)?;
    let mut text = format!("# loess span={span} degree={degree}\ntime,rr_mean,rr_smooth\n");
    for ((x, raw), s) in smooth.x.iter().zip(surface.values()).zip(&smooth.values) {
        text.push_str(&format!("{x},{raw},{s}\n"));
    }
    std::fs::write(out, text)?;
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let (samples, extra) =
        PosteriorSamples::load(&a.fit).with_context(|| format!("reading fit {}", a.fit.display()))?;
    let inputs: FitInputs = serde_json::from_value(extra).context("fit manifest lacks its input paths")?;
    let options = ModelOptions {
        lag_days: samples.lag_days,
        poly_degree: samples.poly_degree,
        fixed_prior: inputs.fixed_prior,
    };
    let (spec, _) = load_spec(&inputs.panel, &inputs.graph, samples.model_id, &options)?;
    let centre = if a.median { Centre::Median } else { Centre::Mean };
    match a.what {
        What::Temporal => {
            if matches!(a.format, Format::Geojson) {
                bail!("temporal surfaces have no regions; use --format csv");
            }
            let (structured, unstructured) = risk::temporal_rr(&samples, &spec, centre)?;
            write_surface(&structured, a.format, None, &a.out)?;
            write_surface(&unstructured, a.format, None, &sibling(&a.out, "_unstructured"))?;
            write_smoothed(&structured, a.loess_span, a.loess_degree, &sibling(&a.out, "_loess"))?;
            write_smoothed(
                &unstructured,
                a.loess_span,
                a.loess_degree,
                &sibling(&a.out, "_unstructured_loess"),
            )?;
        }
        What::Spatial => {
            let s = risk::spatial_rr(&samples, &spec, centre)?;
            write_surface(&s, a.format, a.shapes.as_ref(), &a.out)?;
        }
        What::St => {
            let days = if a.days.is_empty() {
                risk::default_days(&spec)
            } else {
                a.days.clone()
            };
            let s = risk::spatiotemporal_rr(&samples, &spec, &days, centre)?;
            write_surface(&s, a.format, a.shapes.as_ref(), &a.out)?;
        }
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let lat = synth::Lattice::new(a.rows, a.cols);
    let dir = &a.out_dir;
    lat.regions.write_csv(dir.join("regions.csv"))?;
    let features: Vec<_> = lat.shapes.iter().map(|s| (s, serde_json::json!({}))).collect();
    std::fs::write(
        dir.join("shapes.geojson"),
        serde_json::to_string_pretty(&to_feature_collection(&features))? + "\n",
    )?;
    write_neighbor_pairs(dir.join("neighbours.csv"), &lat.regions, &lat.graph)?;
    let width = lat.cell_km * a.cols as f64;
    let height = lat.cell_km * a.rows as f64;
    let stations = synth::synthetic_stations(a.stations, width, height, -20, a.days as i32, a.seed);
    geostat::write_station_csv(dir.join("stations.csv"), &stations)?;
    let start = NaiveDate::from_ymd_opt(2020, 2, 25).expect("valid date");
    let cases = synth::synthetic_cases(&lat.regions, start, a.days, 40.0 * lat.regions.len() as f64, a.seed + 1);
    dataprep::write_cases_csv(dir.join("cases.csv"), &cases)?;
    info!("wrote synthetic inputs to {}", dir.display());
    Ok(())
}
