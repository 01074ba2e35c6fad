//! Relative-risk surfaces from posterior draws, and their export.
//!
//! Every summary exponentiates each draw first and then summarises on the
//! relative-risk scale, so `rr_mean` is the posterior mean of `exp(·)`
//! (or its median when [`Centre::Median`] is requested).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::{to_feature_collection, RegionShape};
use crate::gmrf::EffectRole;
use crate::inference::PosteriorSamples;
use crate::loess::{loess_smooth, SmoothedSeries};
use crate::model::{ModelSpec, Segment, TemporalResolution};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Temporal,
    Spatial,
    SpatioTemporal,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Temporal => "temporal",
            Scope::Spatial => "spatial",
            Scope::SpatioTemporal => "spatio-temporal",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(Scope::Temporal),
            "spatial" => Ok(Scope::Spatial),
            "spatio-temporal" => Ok(Scope::SpatioTemporal),
            _ => Err(Error::Parse(format!("unknown scope `{s}`"))),
        }
    }
}

/// Point summary reported in the `rr_mean` column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centre {
    #[default]
    Mean,
    Median,
}

impl fmt::Display for Centre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Centre::Mean => "mean",
            Centre::Median => "median",
        })
    }
}

impl FromStr for Centre {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Centre::Mean),
            "median" => Ok(Centre::Median),
            _ => Err(Error::Parse(format!("unknown centre `{s}` (expected mean or median)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub region_id: Option<String>,
    pub day: Option<i32>,
    pub week: Option<i32>,
    pub rr_mean: f64,
    pub rr_lo: f64,
    pub rr_hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeRiskSurface {
    pub scope: Scope,
    /// The exponentiated quantity, e.g. `exp(u+v)`.
    pub effect: String,
    pub centre: Centre,
    pub rows: Vec<RiskRow>,
}

impl RelativeRiskSurface {
    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.rr_mean).collect()
    }

    /// LOESS smooth of a temporal series against its week or day numbers.
    pub fn smooth(&self, span: f64, degree: usize) -> Result<SmoothedSeries<f64>> {
        if self.scope != Scope::Temporal {
            return Err(Error::Mismatch("only temporal surfaces can be smoothed".into()));
        }
        let x: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.day.or(r.week).unwrap_or_default() as f64)
            .collect();
        loess_smooth(&x, &self.values(), span, degree)
    }
}

/// Summarises the exponentials of a set of log-RR draws.
fn summarise(log_rr: &mut [f64], centre: Centre) -> (f64, f64, f64) {
    for v in log_rr.iter_mut() {
        *v = v.exp();
    }
    log_rr.sort_by(f64::total_cmp);
    let c = match centre {
        Centre::Mean => stats::mean(log_rr),
        Centre::Median => stats::quantile_sorted(log_rr, 0.5),
    };
    (
        c,
        stats::quantile_sorted(log_rr, 0.025),
        stats::quantile_sorted(log_rr, 0.975),
    )
}

fn effect_offset(spec: &ModelSpec, samples: &PosteriorSamples, role: EffectRole) -> Result<usize> {
    if spec.block(role).is_none() {
        return Err(Error::UnsupportedModel(spec.model_id));
    }
    samples
        .registry
        .range(Segment::Effect(role))
        .map(|r| r.start)
        .ok_or_else(|| Error::Mismatch(format!("samples lack effect `{}`", role.symbol())))
}

fn check_samples(samples: &PosteriorSamples, spec: &ModelSpec) -> Result<()> {
    if samples.model_id != spec.model_id || samples.registry.labels() != spec.registry.labels() {
        return Err(Error::Mismatch(format!(
            "samples are from model {} but the specification is model {}",
            samples.model_id, spec.model_id
        )));
    }
    if samples.n_kept() == 0 {
        return Err(Error::InsufficientData("no posterior draws".into()));
    }
    Ok(())
}

/// Builds one row per index from per-draw log relative risks.
fn rows_from<F>(samples: &PosteriorSamples, n: usize, centre: Centre, log_rr: F) -> Vec<(f64, f64, f64)>
where
    F: Fn(&[f64], usize) -> f64 + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut v: Vec<f64> = samples.iter_draws().map(|d| log_rr(d, k)).collect();
            summarise(&mut v, centre)
        })
        .collect()
}

fn temporal_index(spec: &ModelSpec, t: usize) -> (Option<i32>, Option<i32>) {
    let label = spec.time_labels[t];
    match spec.temporal_resolution {
        Some(TemporalResolution::Daily) => {
            let week = spec.days.iter().position(|&d| d == label).map(|p| spec.weeks[p] as i32);
            (Some(label), week)
        }
        _ => (None, Some(label)),
    }
}

/// Structured `exp(γ)` and unstructured `exp(φ)` temporal relative risks.
pub fn temporal_rr(
    samples: &PosteriorSamples,
    spec: &ModelSpec,
    centre: Centre,
) -> Result<(RelativeRiskSurface, RelativeRiskSurface)> {
    check_samples(samples, spec)?;
    let g = effect_offset(spec, samples, EffectRole::TemporalStructured)?;
    let p = effect_offset(spec, samples, EffectRole::TemporalUnstructured)?;
    let nt = spec.time_labels.len();
    let series = |offset: usize, effect: &str| {
        let rows = rows_from(samples, nt, centre, |d, t| d[offset + t])
            .into_iter()
            .enumerate()
            .map(|(t, (m, lo, hi))| {
                let (day, week) = temporal_index(spec, t);
                RiskRow {
                    region_id: None,
                    day,
                    week,
                    rr_mean: m,
                    rr_lo: lo,
                    rr_hi: hi,
                }
            })
            .collect();
        RelativeRiskSurface {
            scope: Scope::Temporal,
            effect: effect.to_string(),
            centre,
            rows,
        }
    };
    Ok((series(g, "exp(gamma)"), series(p, "exp(phi)")))
}

/// Per-region `exp(u_i + v_i)`.
pub fn spatial_rr(samples: &PosteriorSamples, spec: &ModelSpec, centre: Centre) -> Result<RelativeRiskSurface> {
    check_samples(samples, spec)?;
    let u = effect_offset(spec, samples, EffectRole::SpatialStructured)?;
    let v = effect_offset(spec, samples, EffectRole::SpatialUnstructured)?;
    let rows = rows_from(samples, spec.region_ids.len(), centre, |d, i| d[u + i] + d[v + i])
        .into_iter()
        .zip(&spec.region_ids)
        .map(|((m, lo, hi), id)| RiskRow {
            region_id: Some(id.clone()),
            day: None,
            week: None,
            rr_mean: m,
            rr_lo: lo,
            rr_hi: hi,
        })
        .collect();
    Ok(RelativeRiskSurface {
        scope: Scope::Spatial,
        effect: "exp(u+v)".into(),
        centre,
        rows,
    })
}

/// Every 14th panel day, starting with the first.
pub fn default_days(spec: &ModelSpec) -> Vec<i32> {
    spec.days.iter().step_by(14).copied().collect()
}

/// Per-(region, day) `exp(u_i + v_i + γ_t + φ_t + δ_it)` on the selected
/// day numbers; rows are region-major.
pub fn spatiotemporal_rr(
    samples: &PosteriorSamples,
    spec: &ModelSpec,
    days: &[i32],
    centre: Centre,
) -> Result<RelativeRiskSurface> {
    check_samples(samples, spec)?;
    let delta_block = spec
        .block(EffectRole::Interaction)
        .ok_or(Error::UnsupportedModel(spec.model_id))?;
    let u = effect_offset(spec, samples, EffectRole::SpatialStructured)?;
    let v = effect_offset(spec, samples, EffectRole::SpatialUnstructured)?;
    let g = effect_offset(spec, samples, EffectRole::TemporalStructured)?;
    let p = effect_offset(spec, samples, EffectRole::TemporalUnstructured)?;
    let dl = effect_offset(spec, samples, EffectRole::Interaction)?;
    if days.is_empty() {
        return Err(Error::InsufficientData("no days selected".into()));
    }
    let positions: Vec<usize> = days
        .iter()
        .map(|day| {
            spec.days
                .iter()
                .position(|d| d == day)
                .ok_or_else(|| Error::OutOfRange(format!("day {day} is not in the fitted panel")))
        })
        .collect::<Result<_>>()?;
    let nd = positions.len();
    let n = spec.region_ids.len();
    let index_map = delta_block.index_map;
    let summaries = rows_from(samples, n * nd, centre, |d, k| {
        let (i, t) = (k / nd, spec.day_to_time[positions[k % nd]]);
        d[u + i] + d[v + i] + d[g + t] + d[p + t] + d[dl + index_map.position(i, t)]
    });
    let rows = summaries
        .into_iter()
        .enumerate()
        .map(|(k, (m, lo, hi))| {
            let pos = positions[k % nd];
            RiskRow {
                region_id: Some(spec.region_ids[k / nd].clone()),
                day: Some(spec.days[pos]),
                week: Some(spec.weeks[pos] as i32),
                rr_mean: m,
                rr_lo: lo,
                rr_hi: hi,
            }
        })
        .collect();
    Ok(RelativeRiskSurface {
        scope: Scope::SpatioTemporal,
        effect: "exp(u+v+gamma+phi+delta)".into(),
        centre,
        rows,
    })
}

pub const CSV_HEADER: [&str; 7] = ["scope", "region_id", "day", "week", "rr_mean", "rr_lo", "rr_hi"];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Writes `scope,region_id,day,week,rr_mean,rr_lo,rr_hi`, preceded by `#`
/// lines naming the effect and the point summary.
pub fn write_surface_csv(path: impl AsRef<Path>, surface: &RelativeRiskSurface) -> Result<()> {
    let mut out = format!(
        "# effect {}\n# rr_mean is the posterior {} of the per-draw exponential; rr_lo and rr_hi are its 2.5% and 97.5% quantiles\n",
        surface.effect, surface.centre
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in &surface.rows {
        w.write_record([
            surface.scope.to_string(),
            r.region_id.clone().unwrap_or_default(),
            opt(&r.day),
            opt(&r.week),
            r.rr_mean.to_string(),
            r.rr_lo.to_string(),
            r.rr_hi.to_string(),
        ])?;
    }
    out.push_str(&String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf8"));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_surface_csv(path: impl AsRef<Path>) -> Result<RelativeRiskSurface> {
    let text = std::fs::read_to_string(path)?;
    let mut effect = String::new();
    let mut centre = Centre::Mean;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(e) = line.strip_prefix("# effect ") {
            effect = e.trim().to_string();
        } else if let Some(rest) = line.strip_prefix("# rr_mean is the posterior ") {
            centre = rest.split_whitespace().next().unwrap_or("mean").parse()?;
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    if rdr.headers()?.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Parse(format!(
            "surface header must be `{}`",
            CSV_HEADER.join(",")
        )));
    }
    let mut scope = None;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let s: Scope = rec[0].parse()?;
        if scope.is_some_and(|x| x != s) {
            return Err(Error::Parse("mixed scopes in one surface file".into()));
        }
        scope = Some(s);
        let int = |k: usize| -> Result<Option<i32>> {
            if rec[k].is_empty() {
                Ok(None)
            } else {
                rec[k]
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::Parse(format!("bad integer `{}`", &rec[k])))
            }
        };
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| Error::Parse(format!("bad number `{}`", &rec[k])))
        };
        rows.push(RiskRow {
            region_id: (!rec[1].is_empty()).then(|| rec[1].to_string()),
            day: int(2)?,
            week: int(3)?,
            rr_mean: num(4)?,
            rr_lo: num(5)?,
            rr_hi: num(6)?,
        });
    }
    Ok(RelativeRiskSurface {
        scope: scope.ok_or_else(|| Error::Parse("surface file has no rows".into()))?,
        effect,
        centre,
        rows,
    })
}

/// One GeoJSON feature per row, carrying the CSV fields as properties.
pub fn surface_geojson(surface: &RelativeRiskSurface, shapes: &[RegionShape]) -> Result<serde_json::Value> {
    let mut features = Vec::with_capacity(surface.rows.len());
    for r in &surface.rows {
        let id = r
            .region_id
            .as_ref()
            .ok_or_else(|| Error::Mismatch(format!("{} surface has no regions to map", surface.scope)))?;
        let shape = shapes
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::Mismatch(format!("no polygon for region `{id}`")))?;
        features.push((
            shape,
            json!({
                "scope": surface.scope.as_str(),
                "region_id": id,
                "day": r.day,
                "week": r.week,
                "rr_mean": r.rr_mean,
                "rr_lo": r.rr_lo,
                "rr_hi": r.rr_hi,
                "effect": surface.effect,
                "centre": surface.centre.to_string(),
            }),
        ));
    }
    Ok(to_feature_collection(&features))
}

pub fn write_surface_geojson(
    path: impl AsRef<Path>,
    surface: &RelativeRiskSurface,
    shapes: &[RegionShape],
) -> Result<()> {
    let v = surface_geojson(surface, shapes)?;
    std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::inference::{ChainSamples, SamplerConfig};
    use crate::model::{build_model, ModelOptions};
    use crate::synth;

    fn constant_samples(spec: &ModelSpec, values: &[f64], n: usize) -> PosteriorSamples {
        let chain = ChainSamples {
            draws: values.iter().copied().cycle().take(values.len() * n).collect(),
            deviance: vec![0.0; n],
            acceptance: BTreeMap::new(),
        };
        PosteriorSamples {
            model_id: spec.model_id,
            lag_days: spec.lag_days,
            poly_degree: spec.poly_degree,
            registry: spec.registry.clone(),
            chains: vec![chain.clone(), chain],
            config: SamplerConfig::default(),
        }
    }

    fn spec(id: u8) -> ModelSpec {
        let lat = synth::Lattice::new(1, 3);
        let panel = synth::covariate_panel(&lat.regions, 21, 1);
        build_model(id, &panel, &lat.graph, &ModelOptions::default()).unwrap()
    }

    #[test]
    fn zero_effects_give_unit_risk() {
        for id in [5u8, 9] {
            let s = spec(id);
            let samples = constant_samples(&s, &vec![0.0; s.registry.len()], 5);
            let (g, p) = temporal_rr(&samples, &s, Centre::Mean).unwrap();
            let sp = spatial_rr(&samples, &s, Centre::Mean).unwrap();
            let st = spatiotemporal_rr(&samples, &s, &default_days(&s), Centre::Median).unwrap();
            for r in g.rows.iter().chain(&p.rows).chain(&sp.rows).chain(&st.rows) {
                assert_eq!((r.rr_mean, r.rr_lo, r.rr_hi), (1.0, 1.0, 1.0));
            }
            assert_eq!(sp.rows.len(), 3);
            assert_eq!(st.rows.len(), 3 * default_days(&s).len());
        }
    }

    #[test]
    fn single_cell_sum() {
        let s = spec(5);
        let mut v = vec![0.0; s.registry.len()];
        v[s.registry.index_of("u[r000]").unwrap()] = 0.15;
        v[s.registry.index_of("v[r000]").unwrap()] = 0.05;
        let t = s.time_labels[0];
        v[s.registry.index_of(&format!("gamma[{t}]")).unwrap()] = 0.1;
        v[s.registry.index_of(&format!("phi[{t}]")).unwrap()] = 0.2;
        v[s.registry.index_of(&format!("delta[r000,{t}]")).unwrap()] = -0.1;
        let samples = constant_samples(&s, &v, 4);
        let st = spatiotemporal_rr(&samples, &s, &[s.days[0]], Centre::Mean).unwrap();
        assert!((st.rows[0].rr_mean - 0.4f64.exp()).abs() < 1e-12);
        assert_eq!(st.rows[0].rr_lo, st.rows[0].rr_hi);
    }

    #[test]
    fn mean_is_taken_after_exponentiation() {
        let s = spec(3);
        let k = s.registry.index_of(&format!("gamma[{}]", s.time_labels[0])).unwrap();
        let mut a = vec![0.0; s.registry.len()];
        let mut b = a.clone();
        a[k] = -1.0;
        b[k] = 1.0;
        let mut samples = constant_samples(&s, &a, 1);
        samples.chains[1] = constant_samples(&s, &b, 1).chains[0].clone();
        let (g, _) = temporal_rr(&samples, &s, Centre::Mean).unwrap();
        assert!((g.rows[0].rr_mean - 1f64.cosh()).abs() < 1e-12);
        assert_eq!(g.rows[0].week, Some(s.time_labels[0]));
        assert_eq!(g.rows[0].day, None);
    }

    #[test]
    fn unsupported_models() {
        let s = spec(1);
        let samples = constant_samples(&s, &vec![0.0; s.registry.len()], 2);
        assert!(matches!(
            temporal_rr(&samples, &s, Centre::Mean),
            Err(Error::UnsupportedModel(1))
        ));
        assert!(matches!(
            spatial_rr(&samples, &s, Centre::Mean),
            Err(Error::UnsupportedModel(1))
        ));
        let s = spec(4);
        let samples = constant_samples(&s, &vec![0.0; s.registry.len()], 2);
        assert!(matches!(
            spatiotemporal_rr(&samples, &s, &[1], Centre::Mean),
            Err(Error::UnsupportedModel(4))
        ));
    }

    #[test]
    fn csv_and_geojson_exports() {
        let lat = synth::Lattice::new(1, 3);
        let s = spec(3);
        let mut v = vec![0.0; s.registry.len()];
        v[s.registry.index_of("u[r001]").unwrap()] = 0.3;
        let samples = constant_samples(&s, &v, 3);
        let dir = tempfile::tempdir().unwrap();

        let sp = spatial_rr(&samples, &s, Centre::Mean).unwrap();
        let path = dir.path().join("spatial.csv");
        write_surface_csv(&path, &sp).unwrap();
        assert_eq!(read_surface_csv(&path).unwrap(), sp);
        let gj = surface_geojson(&sp, &lat.shapes).unwrap();
        assert_eq!(gj["features"].as_array().unwrap().len(), 3);
        assert!(gj["features"][1]["properties"]["rr_mean"].as_f64().unwrap() > 1.3);
        assert!(surface_geojson(&sp, &lat.shapes[..2]).is_err());

        let (g, _) = temporal_rr(&samples, &s, Centre::Median).unwrap();
        let path = dir.path().join("temporal.csv");
        write_surface_csv(&path, &g).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(3).unwrap().starts_with("temporal,,,"));
        assert_eq!(read_surface_csv(&path).unwrap(), g);
        assert!(surface_geojson(&g, &lat.shapes).is_err());
    }
}
