//! Daily station observations → ordinary kriging on a regular grid →
//! region-level averages.

mod grid;
mod kriging;
mod variogram;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use grid::{areal_average, assign_point, make_grid, shapes_by_index, ArealValue, Grid};
pub use kriging::{merge_duplicates, ordinary_kriging, KrigingEstimate, OrdinaryKriging};
pub use variogram::{
    empirical_variogram, fit_variogram, FitOptions, StationValue, VariogramBin, VariogramFamily, VariogramFit,
    VariogramModel,
};

use crate::error::{Error, Result};
use crate::geometry::RegionShape;
use crate::graph::RegionSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvVariable {
    /// Hours above the irradiance threshold.
    SolarExposure,
    /// Daily mean temperature, °C.
    MeanTemperature,
    /// km/h.
    WindSpeed,
}

impl EnvVariable {
    pub const ALL: [EnvVariable; 3] = [Self::SolarExposure, Self::MeanTemperature, Self::WindSpeed];

    pub fn name(self) -> &'static str {
        match self {
            Self::SolarExposure => "solar_exposure",
            Self::MeanTemperature => "mean_temperature",
            Self::WindSpeed => "wind_speed",
        }
    }
}

impl fmt::Display for EnvVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown environmental variable `{s}`")))
    }
}

/// One row of the station file `station_id,x_km,y_km,day,variable,value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationObservation {
    pub station_id: String,
    pub x_km: f64,
    pub y_km: f64,
    pub day: i32,
    pub variable: EnvVariable,
    pub value: f64,
}

pub fn read_station_csv(path: impl AsRef<Path>) -> Result<Vec<StationObservation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let rows: Vec<StationObservation> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    let mut seen = BTreeMap::new();
    for r in &rows {
        if !(r.x_km.is_finite() && r.y_km.is_finite()) {
            return Err(Error::Parse(format!(
                "station `{}` has non-finite coordinates",
                r.station_id
            )));
        }
        if seen.insert((r.station_id.clone(), r.day, r.variable), ()).is_some() {
            return Err(Error::Parse(format!(
                "duplicate observation for station `{}`, day {}, {}",
                r.station_id, r.day, r.variable
            )));
        }
    }
    Ok(rows)
}

pub fn write_station_csv(path: impl AsRef<Path>, rows: &[StationObservation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Quality flags attached to a region-day value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueFlags {
    /// Fewer than the configured minimum number of stations reported.
    pub few_stations: bool,
    /// The region had no grid points; the centroid prediction was used.
    pub centroid_fallback: bool,
    /// The automatic variogram fit failed and a default model was used.
    pub variogram_fallback: bool,
    /// Filled by carrying the previous value forward.
    pub imputed: bool,
}

impl ValueFlags {
    pub fn any(&self) -> bool {
        self.few_stations || self.centroid_fallback || self.variogram_fallback || self.imputed
    }

    pub fn merge(&mut self, other: ValueFlags) {
        self.few_stations |= other.few_stations;
        self.centroid_fallback |= other.centroid_fallback;
        self.variogram_fallback |= other.variogram_fallback;
        self.imputed |= other.imputed;
    }
}

impl fmt::Display for ValueFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (self.few_stations, "few_stations"),
            (self.centroid_fallback, "centroid_fallback"),
            (self.variogram_fallback, "variogram_fallback"),
            (self.imputed, "imputed"),
        ];
        let set: Vec<&str> = names.iter().filter(|(on, _)| *on).map(|(_, n)| *n).collect();
        f.write_str(&set.join(";"))
    }
}

impl FromStr for ValueFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = ValueFlags::default();
        for tok in s.split(';').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "few_stations" => flags.few_stations = true,
                "centroid_fallback" => flags.centroid_fallback = true,
                "variogram_fallback" => flags.variogram_fallback = true,
                "imputed" => flags.imputed = true,
                other => return Err(Error::Parse(format!("unknown flag `{other}`"))),
            }
        }
        Ok(flags)
    }
}

/// One row of the kriging output `region_id,day,variable,value,flag`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDayValue {
    pub region_id: String,
    pub day: i32,
    pub variable: EnvVariable,
    pub value: f64,
    pub flags: ValueFlags,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionDayRow {
    region_id: String,
    day: i32,
    variable: EnvVariable,
    value: f64,
    flag: String,
}

pub fn write_region_values_csv(path: impl AsRef<Path>, values: &[RegionDayValue]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for v in values {
        w.serialize(RegionDayRow {
            region_id: v.region_id.clone(),
            day: v.day,
            variable: v.variable,
            value: v.value,
            flag: v.flags.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_region_values_csv(path: impl AsRef<Path>) -> Result<Vec<RegionDayValue>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    rdr.deserialize::<RegionDayRow>()
        .map(|row| {
            let row = row?;
            Ok(RegionDayValue {
                region_id: row.region_id,
                day: row.day,
                variable: row.variable,
                value: row.value,
                flags: row.flag.parse()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct KrigeConfig {
    pub spacing_km: f64,
    /// Stations farther than this from the regions' bounding box are ignored.
    pub buffer_km: f64,
    pub n_bins: usize,
    /// Maximum pair distance for the empirical variogram; defaults to half
    /// the largest inter-station distance.
    pub max_dist_km: Option<f64>,
    pub families: Vec<VariogramFamily>,
    /// Days with fewer reporting stations are flagged.
    pub min_stations: usize,
}

impl Default for KrigeConfig {
    fn default() -> Self {
        Self {
            spacing_km: 5.0,
            buffer_km: 100.0,
            n_bins: 15,
            max_dist_km: None,
            families: VariogramFamily::ALL.to_vec(),
            min_stations: 5,
        }
    }
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

/// Fits a variogram for one day's field, falling back to a default
/// exponential model when the automatic fit is not possible.
pub fn auto_variogram(stations: &[StationValue<f64>], config: &KrigeConfig) -> (VariogramModel<f64>, bool) {
    let mut max_pair = 0.0f64;
    for (a, sa) in stations.iter().enumerate() {
        for sb in &stations[a + 1..] {
            max_pair = max_pair.max(variogram::distance(sa.location, sb.location));
        }
    }
    let max_dist = config.max_dist_km.unwrap_or(max_pair / 2.0).max(1e-9);
    let values: Vec<f64> = stations.iter().map(|s| s.value).collect();
    let var = sample_variance(&values);
    let fitted = empirical_variogram(stations, config.n_bins, max_dist).and_then(|bins| {
        fit_variogram(
            &bins,
            &config.families,
            &FitOptions {
                sample_variance: Some(var),
            },
        )
    });
    match fitted {
        Ok(fit) if fit.model.sill() > 1e-12 * var.max(1.0) => (fit.model, false),
        _ => {
            // Kriging weights do not depend on the variogram's scale, so a
            // unit sill is a safe default for near-constant fields.
            let sill = if var > 0.0 { var } else { 1.0 };
            let model = VariogramModel {
                family: VariogramFamily::Exponential,
                nugget: 0.0,
                partial_sill: sill,
                range: (max_pair / 3.0).max(1e-6),
            };
            (model, true)
        }
    }
}

/// Runs the full kriging pipeline for every (day, variable) present in the
/// observations and returns one row per region, day and variable.
pub fn krige_regions(
    observations: &[StationObservation],
    regions: &RegionSet,
    shapes: &[RegionShape],
    config: &KrigeConfig,
) -> Result<Vec<RegionDayValue>> {
    let grid = make_grid(regions, shapes, config.spacing_km)?;
    let window = grid.bbox.expanded(config.buffer_km);
    let assigned: Vec<usize> = (0..grid.points.len())
        .filter(|&k| grid.region_assignment[k].is_some())
        .collect();

    let mut tasks: BTreeMap<(i32, EnvVariable), Vec<StationValue<f64>>> = BTreeMap::new();
    for o in observations {
        if !window.contains([o.x_km, o.y_km]) || !o.value.is_finite() {
            continue;
        }
        tasks.entry((o.day, o.variable)).or_default().push(StationValue {
            location: [o.x_km, o.y_km],
            value: o.value,
        });
    }

    let results: Vec<Result<Vec<RegionDayValue>>> = tasks
        .par_iter()
        .map(|(&(day, variable), stations)| {
            let mut flags = ValueFlags {
                few_stations: stations.len() < config.min_stations,
                ..Default::default()
            };
            if flags.few_stations {
                warn!("day {day}, {variable}: only {} stations reporting", stations.len());
            }
            if stations.len() < 2 {
                warn!(
                    "day {day}, {variable}: cannot krige with {} station(s); skipped",
                    stations.len()
                );
                return Ok(Vec::new());
            }
            let (model, fallback) = auto_variogram(stations, config);
            flags.variogram_fallback = fallback;
            let ok = OrdinaryKriging::new(stations, model)?;
            let mut estimates = vec![0.0; grid.points.len()];
            for &k in &assigned {
                estimates[k] = ok.predict(grid.points[k]).value;
            }
            let averages = areal_average(&estimates, &grid, |_, c| ok.predict(c).value);
            Ok(averages
                .into_iter()
                .enumerate()
                .map(|(r, a)| {
                    let mut f = flags;
                    f.centroid_fallback = a.centroid_fallback;
                    RegionDayValue {
                        region_id: regions.get(r).id.clone(),
                        day,
                        variable,
                        value: a.value,
                        flags: f,
                    }
                })
                .collect())
        })
        .collect();

    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    out.sort_by(|a, b| (a.day, a.variable, &a.region_id).cmp(&(b.day, b.variable, &b.region_id)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;
    use crate::graph::Region;

    #[test]
    fn flags_roundtrip() {
        let f = ValueFlags {
            few_stations: true,
            imputed: true,
            ..Default::default()
        };
        assert_eq!(f.to_string(), "few_stations;imputed");
        assert_eq!(f.to_string().parse::<ValueFlags>().unwrap(), f);
        assert_eq!("".parse::<ValueFlags>().unwrap(), ValueFlags::default());
        assert!("bogus".parse::<ValueFlags>().is_err());
    }

    #[test]
    fn constant_field_pipeline() {
        let regions = RegionSet::new(
            ["a", "b"]
                .iter()
                .map(|id| Region {
                    id: id.to_string(),
                    name: id.to_string(),
                    population: 1.0,
                    area_km2: None,
                })
                .collect(),
        )
        .unwrap();
        let shapes = vec![
            RegionShape::new("a", vec![Polygon::rectangle([0.0, 0.0], [20.0, 20.0])]),
            RegionShape::new("b", vec![Polygon::rectangle([20.0, 0.0], [40.0, 20.0])]),
        ];
        let mut obs = Vec::new();
        for s in 0..8 {
            obs.push(StationObservation {
                station_id: format!("s{s}"),
                x_km: (s * 13 % 41) as f64,
                y_km: (s * 7 % 23) as f64,
                day: 1,
                variable: EnvVariable::MeanTemperature,
                value: 12.5,
            });
        }
        // Far outside the buffer: ignored.
        obs.push(StationObservation {
            station_id: "far".into(),
            x_km: 5000.0,
            y_km: 0.0,
            day: 1,
            variable: EnvVariable::MeanTemperature,
            value: -100.0,
        });
        let out = krige_regions(&obs, &regions, &shapes, &KrigeConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        for v in &out {
            assert!((v.value - 12.5).abs() < 1e-9, "{v:?}");
            assert!(!v.flags.few_stations);
        }
    }
}
