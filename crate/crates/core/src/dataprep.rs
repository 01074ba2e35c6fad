//! Region × day modelling panel: observed and expected counts, lagged and
//! standardised covariates, polynomial terms and week indices.
//!
//! Cells are stored region-major with the day index fastest
//! (`cell = region · n_days + day_position`).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RegionShape;
use crate::geostat::{EnvVariable, RegionDayValue, ValueFlags};
use crate::graph::RegionSet;

pub const DENSITY_LABEL: &str = "density";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Environmental(EnvVariable),
    Density,
    Power { base: EnvVariable, power: u8 },
}

impl ColumnKind {
    pub fn label(&self) -> String {
        match self {
            Self::Environmental(v) => v.name().to_string(),
            Self::Density => DENSITY_LABEL.to_string(),
            Self::Power { base, power } => format!("{}^{}", base.name(), power),
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        if label == DENSITY_LABEL {
            return Ok(Self::Density);
        }
        if let Some((base, p)) = label.split_once('^') {
            let power: u8 = p
                .parse()
                .map_err(|_| Error::Parse(format!("bad power in column `{label}`")))?;
            return Ok(Self::Power {
                base: base.parse()?,
                power,
            });
        }
        Ok(Self::Environmental(label.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub kind: ColumnKind,
    pub values: Vec<f64>,
}

impl Column {
    pub fn label(&self) -> String {
        self.kind.label()
    }
}

/// Affine transform applied by [`standardize`]: `z = (x − mean) / sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub kind: ColumnKind,
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeeksMode {
    /// `w(t) = ceil(t / 7)`.
    #[default]
    Ceil7,
    /// Monday-based calendar weeks; the week holding day 1 is week 1.
    Calendar,
}

impl FromStr for WeeksMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ceil7" => Ok(Self::Ceil7),
            "calendar" => Ok(Self::Calendar),
            other => Err(Error::Parse(format!("unknown weeks mode `{other}` (ceil7|calendar)"))),
        }
    }
}

impl fmt::Display for WeeksMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ceil7 => "ceil7",
            Self::Calendar => "calendar",
        })
    }
}

/// `ceil(t / 7)` for `1 ≤ t ≤ n_days`.
pub fn week_index(t: i32, n_days: i32) -> Result<u32> {
    if t < 1 || t > n_days {
        return Err(Error::OutOfRange(format!("day {t} outside 1..={n_days}")));
    }
    Ok(((t + 6) / 7) as u32)
}

/// Calendar week of `date`, counting Monday-based weeks from the week that
/// contains `origin` (week 1).
pub fn calendar_week(origin: NaiveDate, date: NaiveDate) -> u32 {
    let monday = origin - chrono::Duration::days(origin.weekday().num_days_from_monday() as i64);
    ((date - monday).num_days().div_euclid(7) + 1) as u32
}

/// Raw (unlagged, unstandardised) environmental series per region, possibly
/// extending before the first case day.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateHistory {
    pub first_day: i32,
    pub n_days: usize,
    pub n_regions: usize,
    /// Region-major values per variable.
    pub values: BTreeMap<EnvVariable, Vec<f64>>,
    pub flags: BTreeMap<EnvVariable, Vec<ValueFlags>>,
}

impl CovariateHistory {
    fn offset(&self, day: i32) -> Option<usize> {
        let k = day - self.first_day;
        (k >= 0 && (k as usize) < self.n_days).then_some(k as usize)
    }

    pub fn last_day(&self) -> i32 {
        self.first_day + self.n_days as i32 - 1
    }

    pub fn get(&self, var: EnvVariable, region: usize, day: i32) -> Option<(f64, ValueFlags)> {
        let k = self.offset(day)?;
        let idx = region * self.n_days + k;
        Some((self.values.get(&var)?[idx], self.flags[&var][idx]))
    }

    /// Builds the history from kriged region-day values. Gaps inside a
    /// region's series are filled by carrying the last value forward
    /// (leading gaps take the first available value) and flagged.
    pub fn from_region_values(regions: &RegionSet, rows: &[RegionDayValue]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Coverage("no covariate values".into()));
        }
        let first_day = rows.iter().map(|r| r.day).min().unwrap();
        let last_day = rows.iter().map(|r| r.day).max().unwrap();
        let n_days = (last_day - first_day + 1) as usize;
        let n = regions.len();
        let mut raw: BTreeMap<EnvVariable, Vec<Option<(f64, ValueFlags)>>> = EnvVariable::ALL
            .into_iter()
            .map(|v| (v, vec![None; n * n_days]))
            .collect();
        for r in rows {
            let i = regions
                .index_of(&r.region_id)
                .ok_or_else(|| Error::UnknownRegion(r.region_id.clone()))?;
            raw.get_mut(&r.variable).unwrap()[i * n_days + (r.day - first_day) as usize] = Some((r.value, r.flags));
        }
        let mut values = BTreeMap::new();
        let mut flags = BTreeMap::new();
        let mut imputed = 0usize;
        for (var, series) in raw {
            let mut vals = vec![0.0; n * n_days];
            let mut fl = vec![ValueFlags::default(); n * n_days];
            for i in 0..n {
                let row = &series[i * n_days..(i + 1) * n_days];
                let first =
                    row.iter().flatten().next().copied().ok_or_else(|| {
                        Error::Coverage(format!("no {var} values for region `{}`", regions.get(i).id))
                    })?;
                let mut last = first;
                for (k, cell) in row.iter().enumerate() {
                    let idx = i * n_days + k;
                    match cell {
                        Some(v) => {
                            last = *v;
                            vals[idx] = v.0;
                            fl[idx] = v.1;
                        }
                        None => {
                            vals[idx] = last.0;
                            fl[idx] = ValueFlags {
                                imputed: true,
                                ..last.1
                            };
                            imputed += 1;
                        }
                    }
                }
            }
            values.insert(var, vals);
            flags.insert(var, fl);
        }
        if imputed > 0 {
            warn!("imputed {imputed} missing covariate cells by carrying values forward");
        }
        Ok(Self {
            first_day,
            n_days,
            n_regions: n,
            values,
            flags,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub region_ids: Vec<String>,
    pub populations: Vec<f64>,
    /// Day numbers; day 1 is the first case date.
    pub days: Vec<i32>,
    pub dates: Vec<NaiveDate>,
    pub weeks: Vec<u32>,
    pub weeks_mode: WeeksMode,
    pub observed: Vec<u64>,
    pub expected: Vec<f64>,
    pub columns: Vec<Column>,
    /// Union of covariate quality flags per cell.
    pub cell_flags: Vec<ValueFlags>,
    pub transforms: Vec<Standardization>,
    pub lag_days: u32,
    /// Leading days removed because lagged covariates were unavailable.
    pub trimmed_days: u32,
    pub poly_degree: u8,
    pub history: Option<CovariateHistory>,
}

impl Panel {
    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_regions() * self.n_days()
    }

    #[inline]
    pub fn cell(&self, region: usize, day_pos: usize) -> usize {
        region * self.n_days() + day_pos
    }

    pub fn column(&self, kind: ColumnKind) -> Option<&Column> {
        self.columns.iter().find(|c| c.kind == kind)
    }

    pub fn column_by_label(&self, label: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.label() == label)
    }

    pub fn daily_totals(&self) -> (Vec<u64>, Vec<f64>) {
        let nd = self.n_days();
        let mut o = vec![0u64; nd];
        let mut e = vec![0.0; nd];
        for i in 0..self.n_regions() {
            for t in 0..nd {
                o[t] += self.observed[self.cell(i, t)];
                e[t] += self.expected[self.cell(i, t)];
            }
        }
        (o, e)
    }

    /// Largest relative gap between `Σ_i E_it` and `Σ_i O_it` over days.
    pub fn offset_identity_error(&self) -> f64 {
        let (o, e) = self.daily_totals();
        o.iter()
            .zip(&e)
            .map(|(&o, &e)| {
                let o = o as f64;
                if o == 0.0 {
                    e.abs()
                } else {
                    (e - o).abs() / o
                }
            })
            .fold(0.0, f64::max)
    }

    fn drop_leading_days(&mut self, k: usize) {
        if k == 0 {
            return;
        }
        let nd = self.n_days();
        let filter = |len: usize| (0..len).filter(move |c| c % nd >= k);
        let n_cells = self.n_cells();
        self.observed = filter(n_cells).map(|c| self.observed[c]).collect();
        self.expected = filter(n_cells).map(|c| self.expected[c]).collect();
        self.cell_flags = filter(n_cells).map(|c| self.cell_flags[c]).collect();
        for col in &mut self.columns {
            col.values = filter(n_cells).map(|c| col.values[c]).collect();
        }
        self.days.drain(..k);
        self.dates.drain(..k);
        self.weeks.drain(..k);
        self.trimmed_days += k as u32;
    }
}

/// `E_it = (Σ_k O_kt) · p_i / Σ_k p_k` for a region-major `n × d` panel.
pub fn expected_cases(observed: &[u64], n_days: usize, populations: &[f64]) -> Vec<f64> {
    let n = populations.len();
    assert_eq!(observed.len(), n * n_days, "observed panel shape");
    let total_pop: f64 = populations.iter().sum();
    let mut totals = vec![0u64; n_days];
    for i in 0..n {
        for t in 0..n_days {
            totals[t] += observed[i * n_days + t];
        }
    }
    let mut e = vec![0.0; n * n_days];
    for i in 0..n {
        let share = populations[i] / total_pop;
        for t in 0..n_days {
            e[i * n_days + t] = totals[t] as f64 * share;
        }
    }
    e
}

/// Row of the cases file `region_id,date,cases`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub region_id: String,
    pub date: NaiveDate,
    pub cases: u64,
}

pub fn read_cases_csv(path: impl AsRef<Path>) -> Result<Vec<CaseRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn write_cases_csv(path: impl AsRef<Path>, rows: &[CaseRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Population per km², from polygons when given, otherwise from the
/// region file's `area_km2`.
pub fn population_density(regions: &RegionSet, shapes: Option<&[RegionShape]>) -> Result<Vec<f64>> {
    let mut areas: Vec<Option<f64>> = regions.iter().map(|r| r.area_km2).collect();
    if let Some(shapes) = shapes {
        for s in shapes {
            if let Some(i) = regions.index_of(&s.id) {
                areas[i] = Some(s.area());
            }
        }
    }
    regions
        .iter()
        .zip(areas)
        .map(|(r, a)| match a {
            Some(a) if a > 0.0 => Ok(r.population / a),
            _ => Err(Error::Mismatch(format!(
                "region `{}` has no area (add `area_km2` or provide polygons)",
                r.id
            ))),
        })
        .collect()
}

/// Assembles the lag-0 panel over the case window. Day 1 is the earliest
/// case date; cells absent from the cases file count as zero.
pub fn build_panel(
    regions: &RegionSet,
    cases: &[CaseRecord],
    history: CovariateHistory,
    density: &[f64],
    weeks_mode: WeeksMode,
) -> Result<Panel> {
    if cases.is_empty() {
        return Err(Error::InsufficientData("empty cases file".into()));
    }
    if density.len() != regions.len() || history.n_regions != regions.len() {
        return Err(Error::Mismatch("density/history do not match the region set".into()));
    }
    let origin = cases.iter().map(|c| c.date).min().unwrap();
    let end = cases.iter().map(|c| c.date).max().unwrap();
    let n_days = ((end - origin).num_days() + 1) as usize;
    let n = regions.len();
    let mut observed = vec![0u64; n * n_days];
    let mut filled = vec![false; n * n_days];
    for c in cases {
        let i = regions
            .index_of(&c.region_id)
            .ok_or_else(|| Error::UnknownRegion(c.region_id.clone()))?;
        let t = (c.date - origin).num_days() as usize;
        observed[i * n_days + t] += c.cases;
        filled[i * n_days + t] = true;
    }
    let missing = filled.iter().filter(|f| !**f).count();
    if missing > 0 {
        info!("{missing} region-days absent from the cases file were set to zero");
    }
    let days: Vec<i32> = (1..=n_days as i32).collect();
    let dates: Vec<NaiveDate> = (0..n_days).map(|k| origin + chrono::Duration::days(k as i64)).collect();
    let weeks = match weeks_mode {
        WeeksMode::Ceil7 => days
            .iter()
            .map(|&t| week_index(t, n_days as i32))
            .collect::<Result<Vec<_>>>()?,
        WeeksMode::Calendar => dates.iter().map(|d| calendar_week(origin, *d)).collect(),
    };
    let expected = expected_cases(&observed, n_days, &regions.populations());
    let mut panel = Panel {
        region_ids: regions.ids(),
        populations: regions.populations(),
        days,
        dates,
        weeks,
        weeks_mode,
        observed,
        expected,
        columns: Vec::new(),
        cell_flags: vec![ValueFlags::default(); n * n_days],
        transforms: Vec::new(),
        lag_days: 0,
        trimmed_days: 0,
        poly_degree: 1,
        history: Some(history),
    };
    panel.columns.push(Column {
        kind: ColumnKind::Density,
        values: (0..n * n_days).map(|c| density[c / n_days]).collect(),
    });
    fill_environment(&mut panel, 0, true)?;
    Ok(panel)
}

fn fill_environment(panel: &mut Panel, lag: u32, trim: bool) -> Result<()> {
    let history = panel
        .history
        .clone()
        .ok_or_else(|| Error::Coverage("panel carries no covariate history".into()))?;
    let lag_i = lag as i32;
    // Leading days whose lagged covariate predates the history.
    let need_trim = panel
        .days
        .iter()
        .take_while(|&&t| t - lag_i < history.first_day)
        .count();
    if need_trim > 0 {
        if !trim {
            return Err(Error::Coverage(format!(
                "lag {lag} needs covariates from day {} but history starts at day {}",
                panel.days[0] - lag_i,
                history.first_day
            )));
        }
        info!("lag {lag}: dropping {need_trim} leading day(s) without lagged covariates");
        panel.drop_leading_days(need_trim);
    }
    if let Some(&last) = panel.days.last() {
        if last - lag_i > history.last_day() {
            return Err(Error::Coverage(format!(
                "covariate history ends at day {} but day {} needs day {}",
                history.last_day(),
                last,
                last - lag_i
            )));
        }
    }
    let nd = panel.n_days();
    let n = panel.n_regions();
    let mut flags = vec![ValueFlags::default(); n * nd];
    let mut env_columns = Vec::new();
    for var in EnvVariable::ALL {
        let mut values = vec![0.0; n * nd];
        for i in 0..n {
            for (k, &t) in panel.days.iter().enumerate() {
                let (v, f) = history
                    .get(var, i, t - lag_i)
                    .ok_or_else(|| Error::Coverage(format!("{var} missing at day {}", t - lag_i)))?;
                values[i * nd + k] = v;
                flags[i * nd + k].merge(f);
            }
        }
        env_columns.push(Column {
            kind: ColumnKind::Environmental(var),
            values,
        });
    }
    let density = panel.columns.iter().find(|c| c.kind == ColumnKind::Density).cloned();
    panel.columns = env_columns;
    panel.columns.extend(density);
    panel.cell_flags = flags;
    panel.lag_days = lag;
    panel.poly_degree = 1;
    Ok(())
}

/// Replaces the environmental covariates by their values `lag_days` earlier.
/// When the history does not reach back far enough, the affected leading
/// days are dropped (if `trim`) or a coverage error is returned.
///
/// Works on unstandardised panels only; standardise and expand afterwards.
pub fn lag_covariates(panel: &Panel, lag_days: u32, trim: bool) -> Result<Panel> {
    if lag_days == panel.lag_days && panel.transforms.is_empty() && panel.poly_degree == 1 {
        return Ok(panel.clone());
    }
    if !panel.transforms.is_empty() {
        return Err(Error::Config("lag covariates before standardising".into()));
    }
    let mut out = panel.clone();
    fill_environment(&mut out, lag_days, trim)?;
    Ok(out)
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Centres and scales every environmental and density column to mean 0 and
/// sample standard deviation 1 over all region-days.
pub fn standardize(panel: &Panel) -> Result<Panel> {
    let mut out = panel.clone();
    for col in &mut out.columns {
        if matches!(col.kind, ColumnKind::Power { .. }) {
            return Err(Error::Config("standardise before polynomial expansion".into()));
        }
        if out.transforms.iter().any(|t| t.kind == col.kind) {
            continue;
        }
        let (mean, sd) = mean_sd(&col.values);
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::ZeroVariance(col.label()));
        }
        let tr = Standardization {
            kind: col.kind,
            mean,
            sd,
        };
        col.values.iter_mut().for_each(|v| *v = tr.apply(*v));
        out.transforms.push(tr);
    }
    Ok(out)
}

/// Appends powers `x², …, x^degree` of the three environmental covariates.
pub fn polynomial_expand(panel: &Panel, degree: u8) -> Result<Panel> {
    if !(1..=3).contains(&degree) {
        return Err(Error::OutOfRange(format!("polynomial degree {degree} not in 1..=3")));
    }
    let mut out = panel.clone();
    out.columns.retain(|c| !matches!(c.kind, ColumnKind::Power { .. }));
    for power in 2..=degree {
        for var in EnvVariable::ALL {
            let base = out
                .column(ColumnKind::Environmental(var))
                .ok_or_else(|| Error::Mismatch(format!("panel lacks `{var}`")))?;
            let values = base.values.iter().map(|v| v.powi(power as i32)).collect();
            out.columns.push(Column {
                kind: ColumnKind::Power { base: var, power },
                values,
            });
        }
    }
    out.poly_degree = degree;
    Ok(out)
}

/// Panel serialisation: `#`-prefixed metadata lines followed by a CSV table
/// `region_id,day,date,week,population,observed,expected,<covariates…>,flag`.
pub fn write_panel_csv(path: impl AsRef<Path>, panel: &Panel) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# lag_days={}", panel.lag_days)?;
    writeln!(file, "# trimmed_days={}", panel.trimmed_days)?;
    writeln!(file, "# poly_degree={}", panel.poly_degree)?;
    writeln!(file, "# weeks_mode={}", panel.weeks_mode)?;
    for t in &panel.transforms {
        writeln!(file, "# standardization {} mean={} sd={}", t.kind.label(), t.mean, t.sd)?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut file);
        let mut header: Vec<String> = ["region_id", "day", "date", "week", "population", "observed", "expected"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(panel.columns.iter().map(Column::label));
        header.push("flag".into());
        w.write_record(&header)?;
        for i in 0..panel.n_regions() {
            for t in 0..panel.n_days() {
                let c = panel.cell(i, t);
                let mut rec = vec![
                    panel.region_ids[i].clone(),
                    panel.days[t].to_string(),
                    panel.dates[t].to_string(),
                    panel.weeks[t].to_string(),
                    panel.populations[i].to_string(),
                    panel.observed[c].to_string(),
                    panel.expected[c].to_string(),
                ];
                rec.extend(panel.columns.iter().map(|col| col.values[c].to_string()));
                rec.push(panel.cell_flags[c].to_string());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
    }
    file.flush()?;
    Ok(())
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("cannot parse {what} from `{s}`")))
}

pub fn read_panel_csv(path: impl AsRef<Path>) -> Result<Panel> {
    let text = std::fs::read_to_string(path)?;
    let mut meta: BTreeMap<String, String> = BTreeMap::new();
    let mut transforms = Vec::new();
    for line in BufReader::new(text.as_bytes()).lines() {
        let line = line?;
        let Some(rest) = line.strip_prefix('#') else { break };
        let rest = rest.trim();
        if let Some(spec) = rest.strip_prefix("standardization ") {
            let mut parts = spec.split_whitespace();
            let kind = ColumnKind::from_label(parts.next().unwrap_or_default())?;
            let mut mean = None;
            let mut sd = None;
            for p in parts {
                if let Some(v) = p.strip_prefix("mean=") {
                    mean = Some(parse_num::<f64>(v, "mean")?);
                } else if let Some(v) = p.strip_prefix("sd=") {
                    sd = Some(parse_num::<f64>(v, "sd")?);
                }
            }
            match (mean, sd) {
                (Some(mean), Some(sd)) => transforms.push(Standardization { kind, mean, sd }),
                _ => return Err(Error::Parse(format!("incomplete standardization line `{line}`"))),
            }
        } else if let Some((k, v)) = rest.split_once('=') {
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let fixed = ["region_id", "day", "date", "week", "population", "observed", "expected"];
    for (k, name) in fixed.iter().enumerate() {
        if header.get(k) != Some(*name) {
            return Err(Error::Parse(format!("panel column {k} must be `{name}`")));
        }
    }
    if header.get(header.len() - 1) != Some("flag") {
        return Err(Error::Parse("last panel column must be `flag`".into()));
    }
    let kinds = (fixed.len()..header.len() - 1)
        .map(|k| ColumnKind::from_label(&header[k]))
        .collect::<Result<Vec<_>>>()?;

    let mut region_ids: Vec<String> = Vec::new();
    let mut populations = Vec::new();
    let mut days: Vec<i32> = Vec::new();
    let mut dates = Vec::new();
    let mut weeks = Vec::new();
    let mut observed = Vec::new();
    let mut expected = Vec::new();
    let mut col_values: Vec<Vec<f64>> = vec![Vec::new(); kinds.len()];
    let mut cell_flags = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let region = &rec[0];
        if region_ids.last().map(String::as_str) != Some(region) {
            region_ids.push(region.to_string());
            populations.push(parse_num::<f64>(&rec[4], "population")?);
        }
        if region_ids.len() == 1 {
            days.push(parse_num(&rec[1], "day")?);
            dates.push(parse_num::<NaiveDate>(&rec[2], "date")?);
            weeks.push(parse_num(&rec[3], "week")?);
        }
        observed.push(parse_num(&rec[5], "observed")?);
        expected.push(parse_num(&rec[6], "expected")?);
        for (k, vals) in col_values.iter_mut().enumerate() {
            vals.push(parse_num(&rec[fixed.len() + k], "covariate")?);
        }
        cell_flags.push(rec[rec.len() - 1].parse()?);
    }
    if observed.len() != region_ids.len() * days.len() {
        return Err(Error::Parse("panel rows are not a complete region × day grid".into()));
    }
    let get = |k: &str, default: &str| meta.get(k).cloned().unwrap_or_else(|| default.to_string());
    let poly_degree = kinds
        .iter()
        .filter_map(|k| match k {
            ColumnKind::Power { power, .. } => Some(*power),
            _ => None,
        })
        .max()
        .unwrap_or(1);
    Ok(Panel {
        region_ids,
        populations,
        days,
        dates,
        weeks,
        weeks_mode: get("weeks_mode", "ceil7").parse()?,
        observed,
        expected,
        columns: kinds
            .into_iter()
            .zip(col_values)
            .map(|(kind, values)| Column { kind, values })
            .collect(),
        cell_flags,
        transforms,
        lag_days: parse_num(&get("lag_days", "0"), "lag_days")?,
        trimmed_days: parse_num(&get("trimmed_days", "0"), "trimmed_days")?,
        poly_degree: parse_num::<u8>(&get("poly_degree", "1"), "poly_degree")?.max(poly_degree),
        history: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Region;

    fn regions(pops: &[f64]) -> RegionSet {
        RegionSet::new(
            pops.iter()
                .enumerate()
                .map(|(i, &p)| Region {
                    id: format!("r{i}"),
                    name: format!("R{i}"),
                    population: p,
                    area_km2: Some(10.0 + i as f64),
                })
                .collect(),
        )
        .unwrap()
    }

    fn history(regions: &RegionSet, first_day: i32, last_day: i32) -> CovariateHistory {
        let mut rows = Vec::new();
        for (i, r) in regions.iter().enumerate() {
            for day in first_day..=last_day {
                for (k, var) in EnvVariable::ALL.into_iter().enumerate() {
                    rows.push(RegionDayValue {
                        region_id: r.id.clone(),
                        day,
                        variable: var,
                        value: (day * 10 + k as i32) as f64 + 0.5 * i as f64 + ((day * 7 + i as i32) % 5) as f64,
                        flags: ValueFlags::default(),
                    });
                }
            }
        }
        CovariateHistory::from_region_values(regions, &rows).unwrap()
    }

    fn cases(regions: &RegionSet, n_days: i64) -> Vec<CaseRecord> {
        let origin = NaiveDate::from_ymd_opt(2020, 2, 25).unwrap();
        let mut out = Vec::new();
        for (i, r) in regions.iter().enumerate() {
            for d in 0..n_days {
                out.push(CaseRecord {
                    region_id: r.id.clone(),
                    date: origin + chrono::Duration::days(d),
                    cases: ((d as u64 * 3 + i as u64 * 5) % 11) * (d as u64 % 4),
                });
            }
        }
        out
    }

    fn panel(pre: i32, n_days: i32) -> Panel {
        let rs = regions(&[100.0, 250.0, 50.0]);
        let h = history(&rs, 1 - pre, n_days);
        let density = population_density(&rs, None).unwrap();
        build_panel(&rs, &cases(&rs, n_days as i64), h, &density, WeeksMode::Ceil7).unwrap()
    }

    #[test]
    fn expected_cases_examples() {
        assert_eq!(expected_cases(&[4, 6], 1, &[1.0, 1.0]), vec![5.0, 5.0]);
        let e = expected_cases(&[2, 8], 1, &[30.0, 70.0]);
        assert!((e[0] - 3.0).abs() < 1e-12 && (e[1] - 7.0).abs() < 1e-12);
        // A region holding 30% of 7,619,494 inhabitants on a day with 100 cases.
        let big = 0.3 * 7_619_494.0;
        let e = expected_cases(&[40, 60], 1, &[big, 7_619_494.0 - big]);
        assert!((e[0] - 30.0).abs() < 1e-9);
    }

    #[test]
    fn offset_identity_holds() {
        let p = panel(0, 30);
        assert!(p.offset_identity_error() <= 1e-9);
    }

    #[test]
    fn week_indices() {
        assert_eq!(week_index(1, 182).unwrap(), 1);
        assert_eq!(week_index(7, 182).unwrap(), 1);
        assert_eq!(week_index(8, 182).unwrap(), 2);
        assert_eq!(week_index(182, 182).unwrap(), 26);
        assert!(week_index(0, 182).is_err());
        assert!(week_index(183, 182).is_err());
    }

    #[test]
    fn calendar_weeks_give_twenty_seven() {
        // 25 Feb 2020 (a Tuesday) to 24 Aug 2020 (a Monday).
        let origin = NaiveDate::from_ymd_opt(2020, 2, 25).unwrap();
        let last = NaiveDate::from_ymd_opt(2020, 8, 24).unwrap();
        assert_eq!((last - origin).num_days() + 1, 182);
        assert_eq!(calendar_week(origin, origin), 1);
        assert_eq!(calendar_week(origin, NaiveDate::from_ymd_opt(2020, 3, 1).unwrap()), 1);
        assert_eq!(calendar_week(origin, NaiveDate::from_ymd_opt(2020, 3, 2).unwrap()), 2);
        assert_eq!(calendar_week(origin, last), 27);
    }

    #[test]
    fn weeks_monotone_and_surjective() {
        let p = panel(0, 40);
        assert!(p.weeks.windows(2).all(|w| w[0] <= w[1]));
        let max = *p.weeks.last().unwrap();
        for w in 1..=max {
            let n = p.weeks.iter().filter(|&&x| x == w).count();
            assert!((1..=7).contains(&n));
        }
    }

    #[test]
    fn lag_zero_is_identity() {
        let p = panel(0, 20);
        assert_eq!(lag_covariates(&p, 0, false).unwrap(), p);
    }

    #[test]
    fn lag_seven_with_pre_period() {
        let p = panel(7, 20);
        let lagged = lag_covariates(&p, 7, false).unwrap();
        assert_eq!(lagged.n_days(), 20);
        let h = p.history.as_ref().unwrap();
        let col = lagged
            .column(ColumnKind::Environmental(EnvVariable::WindSpeed))
            .unwrap();
        let (raw, _) = h.get(EnvVariable::WindSpeed, 1, -6).unwrap();
        assert_eq!(col.values[lagged.cell(1, 0)], raw);
    }

    #[test]
    fn lag_fourteen_trims_without_history() {
        let p = panel(0, 40);
        assert!(matches!(lag_covariates(&p, 14, false), Err(Error::Coverage(_))));
        let lagged = lag_covariates(&p, 14, true).unwrap();
        assert_eq!(lagged.days.first(), Some(&15));
        assert_eq!(lagged.days.last(), Some(&40));
        assert_eq!(lagged.trimmed_days, 14);
        assert!(lagged.offset_identity_error() <= 1e-9);
    }

    #[test]
    fn standardize_examples() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        let p = standardize(&panel(0, 30)).unwrap();
        for col in &p.columns {
            let (m, s) = mean_sd(&col.values);
            assert!(m.abs() <= 1e-10, "{}", col.label());
            assert!((s - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_column_is_rejected() {
        let mut p = panel(0, 10);
        p.columns[0].values.iter_mut().for_each(|v| *v = 3.0);
        let label = p.columns[0].label();
        assert!(matches!(standardize(&p), Err(Error::ZeroVariance(l)) if l == label));
    }

    #[test]
    fn standardization_inverts() {
        let raw = panel(0, 25);
        let std = standardize(&raw).unwrap();
        for (col, rawcol) in std.columns.iter().zip(&raw.columns) {
            let tr = std.transforms.iter().find(|t| t.kind == col.kind).unwrap();
            for (z, x) in col.values.iter().zip(&rawcol.values) {
                assert!((tr.invert(*z) - x).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn polynomial_columns() {
        let p = standardize(&panel(0, 15)).unwrap();
        assert_eq!(polynomial_expand(&p, 1).unwrap(), p);
        let p3 = polynomial_expand(&p, 3).unwrap();
        assert_eq!(p3.columns.len(), p.columns.len() + 6);
        let mut dropped = p3.clone();
        dropped.columns.truncate(p.columns.len());
        dropped.poly_degree = 1;
        assert_eq!(dropped, p);
        let mut q = p.clone();
        q.columns[0].values[0] = 2.0;
        let q2 = polynomial_expand(&q, 2).unwrap();
        let sq = q2
            .column(ColumnKind::Power {
                base: EnvVariable::SolarExposure,
                power: 2,
            })
            .unwrap();
        assert_eq!(sq.values[0], 4.0);
        assert!(polynomial_expand(&p, 4).is_err());
    }

    #[test]
    fn panel_csv_roundtrip() {
        let p = polynomial_expand(
            &standardize(&lag_covariates(&panel(7, 21), 7, true).unwrap()).unwrap(),
            2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_panel_csv(&path, &p).unwrap();
        let back = read_panel_csv(&path).unwrap();
        let mut expected = p.clone();
        expected.history = None;
        assert_eq!(back, expected);
    }

    #[test]
    fn gaps_are_carried_forward_and_flagged() {
        let rs = regions(&[1.0]);
        let mk = |day, v| RegionDayValue {
            region_id: "r0".into(),
            day,
            variable: EnvVariable::MeanTemperature,
            value: v,
            flags: ValueFlags::default(),
        };
        let mut rows = vec![mk(1, 5.0), mk(3, 7.0)];
        for var in [EnvVariable::SolarExposure, EnvVariable::WindSpeed] {
            for day in 1..=3 {
                rows.push(RegionDayValue {
                    variable: var,
                    ..mk(day, 1.0)
                });
            }
        }
        let h = CovariateHistory::from_region_values(&rs, &rows).unwrap();
        let (v, f) = h.get(EnvVariable::MeanTemperature, 0, 2).unwrap();
        assert_eq!(v, 5.0);
        assert!(f.imputed);
    }
}
