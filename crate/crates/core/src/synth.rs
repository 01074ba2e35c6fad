//! Synthetic fixtures: lattice region sets, a 42-region fixture with
//! realistic populations, station and case generators, and draws from the
//! intrinsic GMRF priors for simulation studies.

use chrono::NaiveDate;
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::dataprep::{self, CaseRecord, CovariateHistory, Panel, WeeksMode};
use crate::error::Result;
use crate::geometry::{Polygon, RegionShape};
use crate::geostat::{EnvVariable, RegionDayValue, StationObservation, ValueFlags};
use crate::gmrf::StructureMatrix;
use crate::graph::{AdjacencyGraph, Region, RegionSet};
use crate::model::{Design, ModelSpec, ParameterVector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rectangular lattice of square regions with rook adjacency. Region `k`
/// (row-major) has id `r{k:03}`.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub regions: RegionSet,
    pub shapes: Vec<RegionShape>,
    pub graph: AdjacencyGraph,
    pub cell_km: f64,
}

impl Lattice {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        let ids: Vec<String> = (0..n_rows * n_cols).map(|k| format!("r{k:03}")).collect();
        let names = ids.clone();
        let pops: Vec<f64> = (0..n_rows * n_cols)
            .map(|k| 20_000.0 + 15_000.0 * ((k * 7) % 11) as f64)
            .collect();
        Self::with_names(n_rows, n_cols, ids, names, pops, 30.0)
    }

    fn with_names(
        n_rows: usize,
        n_cols: usize,
        ids: Vec<String>,
        names: Vec<String>,
        pops: Vec<f64>,
        cell_km: f64,
    ) -> Self {
        let n = n_rows * n_cols;
        assert_eq!(ids.len(), n);
        let mut regions = Vec::with_capacity(n);
        let mut shapes = Vec::with_capacity(n);
        let mut pairs = Vec::new();
        for r in 0..n_rows {
            for c in 0..n_cols {
                let k = r * n_cols + c;
                let min = [c as f64 * cell_km, r as f64 * cell_km];
                let max = [min[0] + cell_km, min[1] + cell_km];
                regions.push(Region {
                    id: ids[k].clone(),
                    name: names[k].clone(),
                    population: pops[k],
                    area_km2: Some(cell_km * cell_km),
                });
                shapes.push(RegionShape::new(ids[k].clone(), vec![Polygon::rectangle(min, max)]));
                if c + 1 < n_cols {
                    pairs.push((ids[k].clone(), ids[k + 1].clone()));
                }
                if r + 1 < n_rows {
                    pairs.push((ids[k].clone(), ids[k + n_cols].clone()));
                }
            }
        }
        let regions = RegionSet::new(regions).expect("lattice ids are unique");
        let graph = crate::graph::build_adjacency(&regions, &pairs).expect("lattice pairs are valid");
        Self {
            regions,
            shapes,
            graph,
            cell_km,
        }
    }
}

/// The 42 Catalan comarques with 2019-scale populations (total 7,619,494),
/// laid out on a synthetic 6 × 7 lattice. Geometry and adjacency are
/// schematic, not geographic.
pub fn catalonia_fixture() -> Lattice {
    const COMARQUES: [(&str, f64); 42] = [
        ("Alt Camp", 45_080.0),
        ("Alt Empordà", 141_300.0),
        ("Alt Penedès", 109_600.0),
        ("Alt Urgell", 20_500.0),
        ("Alta Ribagorça", 3_800.0),
        ("Anoia", 119_500.0),
        ("Aran", 10_000.0),
        ("Bages", 178_800.0),
        ("Baix Camp", 192_000.0),
        ("Baix Ebre", 79_800.0),
        ("Baix Empordà", 136_300.0),
        ("Baix Llobregat", 830_100.0),
        ("Baix Penedès", 104_600.0),
        ("Barcelonès", 2_255_000.0),
        ("Berguedà", 39_200.0),
        ("Cerdanya", 18_100.0),
        ("Conca de Barberà", 20_000.0),
        ("Garraf", 149_100.0),
        ("Garrigues", 19_000.0),
        ("Garrotxa", 57_000.0),
        ("Gironès", 190_400.0),
        ("Maresme", 448_600.0),
        ("Moianès", 13_700.0),
        ("Montsià", 68_600.0),
        ("Noguera", 39_100.0),
        ("Osona", 158_800.0),
        ("Pallars Jussà", 13_000.0),
        ("Pallars Sobirà", 7_000.0),
        ("Pla d'Urgell", 37_000.0),
        ("Pla de l'Estany", 32_300.0),
        ("Priorat", 9_300.0),
        ("Ribera d'Ebre", 22_000.0),
        ("Ripollès", 25_000.0),
        ("Segarra", 22_700.0),
        ("Segrià", 210_600.0),
        ("Selva", 172_800.0),
        ("Solsonès", 13_600.0),
        ("Tarragonès", 251_300.0),
        ("Terra Alta", 11_300.0),
        ("Urgell", 36_500.0),
        ("Vallès Occidental", 0.0),
        ("Vallès Oriental", 406_400.0),
    ];
    const TOTAL: f64 = 7_619_494.0;
    let known: f64 = COMARQUES.iter().map(|c| c.1).sum();
    let ids: Vec<String> = COMARQUES.iter().map(|(name, _)| slug(name)).collect();
    let names: Vec<String> = COMARQUES.iter().map(|(name, _)| name.to_string()).collect();
    let pops: Vec<f64> = COMARQUES
        .iter()
        .map(|&(_, p)| if p == 0.0 { TOTAL - known } else { p })
        .collect();
    Lattice::with_names(6, 7, ids, names, pops, 40.0)
}

/// ASCII, lowercase, underscore-separated identifier.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for ch in name.chars() {
        let c = match ch {
            'à' | 'á' | 'À' => 'a',
            'è' | 'é' | 'È' | 'É' => 'e',
            'í' | 'ï' => 'i',
            'ò' | 'ó' => 'o',
            'ú' | 'ü' => 'u',
            'ç' => 'c',
            c if c.is_ascii_alphanumeric() => c.to_ascii_lowercase(),
            _ => '_',
        };
        if c == '_' && (out.is_empty() || out.ends_with('_')) {
            continue;
        }
        out.push(c);
    }
    out.trim_end_matches('_').to_string()
}

fn env_value(var: EnvVariable, x: f64, y: f64, day: i32, phase: f64) -> f64 {
    let season = (day as f64 / 182.0 * std::f64::consts::PI + phase).sin();
    let weekly = (day as f64 * 2.0 * std::f64::consts::PI / 9.3 + phase).sin();
    match var {
        EnvVariable::SolarExposure => 8.0 + 3.0 * season + 0.9 * weekly + 0.01 * x,
        EnvVariable::MeanTemperature => 14.0 + 8.0 * season + 1.5 * weekly - 0.02 * y + 0.005 * x,
        EnvVariable::WindSpeed => 12.0 + 2.0 * (weekly * 1.7).cos() + 0.015 * y - 1.5 * season,
    }
}

/// Smooth environmental fields with noise, observed at randomly placed
/// stations inside `[0, width] × [0, height]` km for days `first..=last`.
pub fn synthetic_stations(
    n_stations: usize,
    width_km: f64,
    height_km: f64,
    first_day: i32,
    last_day: i32,
    seed: u64,
) -> Vec<StationObservation> {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 0.4).unwrap();
    let sites: Vec<[f64; 2]> = (0..n_stations)
        .map(|_| [r.random::<f64>() * width_km, r.random::<f64>() * height_km])
        .collect();
    let mut out = Vec::new();
    for (s, site) in sites.iter().enumerate() {
        for day in first_day..=last_day {
            for var in EnvVariable::ALL {
                out.push(StationObservation {
                    station_id: format!("s{s:03}"),
                    x_km: site[0],
                    y_km: site[1],
                    day,
                    variable: var,
                    value: env_value(var, site[0], site[1], day, 0.3) + noise.sample(&mut r),
                });
            }
        }
    }
    out
}

/// Region-level environmental series evaluated at region-specific offsets,
/// as if already kriged.
pub fn environment_values(regions: &RegionSet, first_day: i32, last_day: i32, seed: u64) -> Vec<RegionDayValue> {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut out = Vec::new();
    for (i, region) in regions.iter().enumerate() {
        let (x, y) = ((i * 37 % 13) as f64 * 20.0, (i * 11 % 7) as f64 * 30.0);
        for day in first_day..=last_day {
            for var in EnvVariable::ALL {
                out.push(RegionDayValue {
                    region_id: region.id.clone(),
                    day,
                    variable: var,
                    value: env_value(var, x, y, day, 0.1 * i as f64) + noise.sample(&mut r),
                    flags: ValueFlags::default(),
                });
            }
        }
    }
    out
}

/// Daily case counts following an epidemic-shaped curve, split across
/// regions in proportion to population with Poisson noise.
pub fn synthetic_cases(regions: &RegionSet, start: NaiveDate, n_days: usize, peak: f64, seed: u64) -> Vec<CaseRecord> {
    let mut r = rng(seed);
    let total_pop: f64 = regions.populations().iter().sum();
    let mut out = Vec::new();
    for (i, region) in regions.iter().enumerate() {
        let risk = 0.6 + 0.8 * ((i * 5 % 9) as f64 / 8.0);
        for d in 0..n_days {
            let s = (d as f64 + 1.0) / n_days as f64;
            let curve = peak * (0.15 + (-(s - 0.35).powi(2) / 0.03).exp());
            let mean = curve * region.population / total_pop * risk;
            let cases = if mean > 0.0 {
                Poisson::new(mean).unwrap().sample(&mut r) as u64
            } else {
                0
            };
            out.push(CaseRecord {
                region_id: region.id.clone(),
                date: start + chrono::Duration::days(d as i64),
                cases,
            });
        }
    }
    out
}

/// Lag-0 standardised panel over `n_days` with synthetic cases and
/// covariates (history covers `1 − 14 ..= n_days`).
pub fn covariate_panel(regions: &RegionSet, n_days: usize, seed: u64) -> Panel {
    let start = NaiveDate::from_ymd_opt(2020, 2, 25).unwrap();
    let cases = synthetic_cases(regions, start, n_days, 40.0 * regions.len() as f64, seed);
    let env = environment_values(regions, -13, n_days as i32, seed.wrapping_add(1));
    let history = CovariateHistory::from_region_values(regions, &env).unwrap();
    let density = dataprep::population_density(regions, None).unwrap();
    let panel = dataprep::build_panel(regions, &cases, history, &density, WeeksMode::Ceil7).unwrap();
    dataprep::standardize(&panel).unwrap()
}

/// Draw from the intrinsic Gaussian prior with precision `τ R`, supported on
/// the orthogonal complement of the null space.
pub fn sample_intrinsic<R: Rng + ?Sized>(structure: &StructureMatrix<f64>, tau: f64, rng: &mut R) -> Vec<f64> {
    let eig = SymmetricEigen::new(structure.matrix().to_dense());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = crate::gmrf::RANK_REL_TOL * max.max(1.0);
    let std = Normal::new(0.0, 1.0).unwrap();
    let n = structure.dim();
    let mut x = vec![0.0; n];
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= tol {
            continue;
        }
        let z: f64 = std.sample(rng) / (tau * lambda).sqrt();
        for (j, xj) in x.iter_mut().enumerate() {
            *xj += z * eig.eigenvectors[(j, k)];
        }
    }
    x
}

/// Draws every random-effect block of `params` from its prior at the
/// precisions stored in `params` (as `log τ`).
pub fn sample_effects<R: Rng + ?Sized>(spec: &ModelSpec, params: &mut ParameterVector, rng: &mut R) {
    use crate::model::Segment;
    for b in &spec.random_blocks {
        let tau = params.segment(Segment::LogPrecision(b.role))[0].exp();
        let x = sample_intrinsic(&b.structure, tau, rng);
        params.segment_mut(Segment::Effect(b.role)).copy_from_slice(&x);
    }
}

/// Replaces the panel's counts by Poisson draws at `η = E · r(params)`.
/// Expected counts are left as they are.
pub fn simulate_counts<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParameterVector,
    panel: &mut Panel,
    rng: &mut R,
) -> Result<()> {
    let design = Design::new(spec, panel)?;
    let log_eta = design.log_eta(spec, params);
    for (o, le) in panel.observed.iter_mut().zip(log_eta) {
        let mean = le.exp();
        *o = if mean > 0.0 {
            Poisson::new(mean).unwrap().sample(rng) as u64
        } else {
            0
        };
    }
    Ok(())
}
