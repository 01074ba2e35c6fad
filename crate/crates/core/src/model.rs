//! The twelve model structures: fixed-effect design, random-effect blocks,
//! parameter registry, linear predictor and Poisson likelihood.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataprep::{ColumnKind, Panel};
use crate::error::{Error, Result};
use crate::geostat::EnvVariable;
use crate::gmrf::{
    iid_structure, interaction_structure, rw2_structure, EffectRole, IndexMap, InteractionKind, RandomEffectBlock,
    StructureMatrix,
};
use crate::graph::{icar_structure, AdjacencyGraph};
use crate::stats::ln_factorial;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalResolution {
    Weekly,
    Daily,
}

/// Prior on the intercept and regression coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FixedEffectPrior {
    /// Improper uniform prior.
    #[default]
    Flat,
    /// Independent `Normal(0, variance)`.
    Normal { variance: f64 },
}

impl FixedEffectPrior {
    pub const PROPER_VARIANCE: f64 = 1e6;

    pub fn log_density(&self, beta: &[f64]) -> f64 {
        match *self {
            Self::Flat => 0.0,
            Self::Normal { variance } => -0.5 * beta.iter().map(|b| b * b).sum::<f64>() / variance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub lag_days: u32,
    pub poly_degree: u8,
    pub fixed_prior: FixedEffectPrior,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            lag_days: 0,
            poly_degree: 1,
            fixed_prior: FixedEffectPrior::Flat,
        }
    }
}

/// What a stretch of the parameter vector holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Fixed,
    Effect(EffectRole),
    LogPrecision(EffectRole),
}

/// Labels and block ranges partitioning the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    labels: Vec<String>,
    segments: Vec<(Segment, Range<usize>)>,
}

impl Registry {
    fn push(&mut self, seg: Segment, labels: impl IntoIterator<Item = String>) {
        let start = self.labels.len();
        self.labels.extend(labels);
        self.segments.push((seg, start..self.labels.len()));
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn segments(&self) -> &[(Segment, Range<usize>)] {
        &self.segments
    }

    pub fn range(&self, seg: Segment) -> Option<Range<usize>> {
        self.segments.iter().find(|(s, _)| *s == seg).map(|(_, r)| r.clone())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Checks that the segments tile `0..len` without gaps or overlaps.
    pub fn is_partition(&self) -> bool {
        let mut next = 0;
        for (_, r) in &self.segments {
            if r.start != next {
                return false;
            }
            next = r.end;
        }
        next == self.labels.len()
    }
}

/// Concatenated `(μ, β, u, v, γ, φ, δ, log τ_·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub registry: Arc<Registry>,
    pub values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(registry: Arc<Registry>) -> Self {
        let values = vec![0.0; registry.len()];
        Self { registry, values }
    }

    pub fn segment(&self, seg: Segment) -> &[f64] {
        match self.registry.range(seg) {
            Some(r) => &self.values[r],
            None => &[],
        }
    }

    pub fn segment_mut(&mut self, seg: Segment) -> &mut [f64] {
        match self.registry.range(seg) {
            Some(r) => &mut self.values[r],
            None => &mut [],
        }
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.registry.index_of(label).map(|k| self.values[k])
    }

    pub fn set(&mut self, label: &str, value: f64) -> Result<()> {
        let k = self
            .registry
            .index_of(label)
            .ok_or_else(|| Error::Mismatch(format!("no parameter `{label}`")))?;
        self.values[k] = value;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub model_id: u8,
    /// `mu` followed by the covariate labels.
    pub fixed_effects: Vec<String>,
    pub fixed_columns: Vec<ColumnKind>,
    pub random_blocks: Vec<RandomEffectBlock<f64>>,
    pub temporal_resolution: Option<TemporalResolution>,
    pub interaction_kind: Option<InteractionKind>,
    pub lag_days: u32,
    pub poly_degree: u8,
    pub fixed_prior: FixedEffectPrior,
    pub region_ids: Vec<String>,
    /// Week or day number of each temporal unit.
    pub time_labels: Vec<i32>,
    /// Temporal unit of each panel day.
    pub day_to_time: Vec<usize>,
    /// Panel day numbers and their week indices.
    pub days: Vec<i32>,
    pub weeks: Vec<u32>,
    pub registry: Arc<Registry>,
}

pub fn temporal_resolution_of(id: u8) -> Option<TemporalResolution> {
    match id {
        3 | 5..=8 => Some(TemporalResolution::Weekly),
        4 | 9..=12 => Some(TemporalResolution::Daily),
        _ => None,
    }
}

pub fn interaction_kind_of(id: u8) -> Option<InteractionKind> {
    match id {
        5..=12 => Some(InteractionKind::ALL[((id - 5) % 4) as usize]),
        _ => None,
    }
}

fn beta_label(kind: ColumnKind) -> String {
    format!("beta[{}]", kind.label())
}

pub fn build_model(id: u8, panel: &Panel, graph: &AdjacencyGraph, options: &ModelOptions) -> Result<ModelSpec> {
    if !(1..=12).contains(&id) {
        return Err(Error::InvalidModel(format!("model id {id} not in 1..=12")));
    }
    if graph.n() != panel.n_regions() {
        return Err(Error::Mismatch(format!(
            "graph has {} regions, panel has {}",
            graph.n(),
            panel.n_regions()
        )));
    }
    if options.lag_days != panel.lag_days {
        return Err(Error::Mismatch(format!(
            "model asks for lag {} but the panel carries lag {}",
            options.lag_days, panel.lag_days
        )));
    }
    if !(1..=3).contains(&options.poly_degree) || options.poly_degree > panel.poly_degree.max(1) {
        return Err(Error::Mismatch(format!(
            "polynomial degree {} unavailable (panel expanded to degree {})",
            options.poly_degree, panel.poly_degree
        )));
    }

    let mut fixed_columns: Vec<ColumnKind> = EnvVariable::ALL.into_iter().map(ColumnKind::Environmental).collect();
    if id >= 2 {
        fixed_columns.push(ColumnKind::Density);
    }
    for power in 2..=options.poly_degree {
        for var in EnvVariable::ALL {
            fixed_columns.push(ColumnKind::Power { base: var, power });
        }
    }
    for kind in &fixed_columns {
        if panel.column(*kind).is_none() {
            return Err(Error::Mismatch(format!("panel lacks covariate `{}`", kind.label())));
        }
    }
    let mut fixed_effects = vec!["mu".to_string()];
    fixed_effects.extend(fixed_columns.iter().map(|k| beta_label(*k)));

    let resolution = temporal_resolution_of(id);
    let (time_labels, day_to_time) = match resolution {
        Some(TemporalResolution::Weekly) | None => {
            let first = *panel
                .weeks
                .first()
                .ok_or_else(|| Error::InsufficientData("panel has no days".into()))?;
            let last = *panel.weeks.last().unwrap();
            let labels: Vec<i32> = (first..=last).map(|w| w as i32).collect();
            let map: Vec<usize> = panel.weeks.iter().map(|w| (w - first) as usize).collect();
            if resolution.is_some() {
                (labels, map)
            } else {
                (Vec::new(), vec![0; panel.n_days()])
            }
        }
        Some(TemporalResolution::Daily) => (panel.days.clone(), (0..panel.n_days()).collect()),
    };

    let n = panel.n_regions();
    let nt = time_labels.len();
    let mut random_blocks = Vec::new();
    let interaction = interaction_kind_of(id);
    if id >= 3 {
        let spatial = Arc::new(icar_structure::<f64>(graph)?);
        let temporal = Arc::new(rw2_structure::<f64>(nt)?);
        random_blocks.push(RandomEffectBlock::new(
            EffectRole::SpatialStructured,
            spatial.clone(),
            IndexMap::Region { n },
        )?);
        random_blocks.push(RandomEffectBlock::new(
            EffectRole::SpatialUnstructured,
            Arc::new(iid_structure(n)?),
            IndexMap::Region { n },
        )?);
        random_blocks.push(RandomEffectBlock::new(
            EffectRole::TemporalStructured,
            temporal.clone(),
            IndexMap::Time { n: nt },
        )?);
        random_blocks.push(RandomEffectBlock::new(
            EffectRole::TemporalUnstructured,
            Arc::new(iid_structure(nt)?),
            IndexMap::Time { n: nt },
        )?);
        if let Some(kind) = interaction {
            let s: StructureMatrix<f64> = interaction_structure(kind, &spatial, &temporal)?;
            random_blocks.push(RandomEffectBlock::new(
                EffectRole::Interaction,
                Arc::new(s),
                IndexMap::RegionTime {
                    n_regions: n,
                    n_time: nt,
                },
            )?);
        }
    }

    let mut registry = Registry {
        labels: Vec::new(),
        segments: Vec::new(),
    };
    registry.push(Segment::Fixed, fixed_effects.clone());
    for b in &random_blocks {
        let sym = b.role.symbol();
        let labels: Vec<String> = match b.index_map {
            IndexMap::Region { .. } => panel.region_ids.iter().map(|r| format!("{sym}[{r}]")).collect(),
            IndexMap::Time { .. } => time_labels.iter().map(|t| format!("{sym}[{t}]")).collect(),
            IndexMap::RegionTime { .. } => panel
                .region_ids
                .iter()
                .flat_map(|r| time_labels.iter().map(move |t| format!("{sym}[{r},{t}]")))
                .collect(),
        };
        registry.push(Segment::Effect(b.role), labels);
    }
    for b in &random_blocks {
        registry.push(
            Segment::LogPrecision(b.role),
            std::iter::once(format!("log_tau_{}", b.role.symbol())),
        );
    }

    Ok(ModelSpec {
        model_id: id,
        fixed_effects,
        fixed_columns,
        random_blocks,
        temporal_resolution: resolution,
        interaction_kind: interaction,
        lag_days: options.lag_days,
        poly_degree: options.poly_degree,
        fixed_prior: options.fixed_prior,
        region_ids: panel.region_ids.clone(),
        time_labels,
        day_to_time,
        days: panel.days.clone(),
        weeks: panel.weeks.clone(),
        registry: Arc::new(registry),
    })
}

impl ModelSpec {
    pub fn block(&self, role: EffectRole) -> Option<&RandomEffectBlock<f64>> {
        self.random_blocks.iter().find(|b| b.role == role)
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed_effects.len()
    }

    pub fn zero_parameters(&self) -> ParameterVector {
        ParameterVector::zeros(self.registry.clone())
    }

    /// One-line composition of `log r_it`, e.g.
    /// `mu + log(E_it) + sum_{j=1}^{4} beta_j x_jit + u_i + v_i + gamma_w(t) + phi_w(t)`.
    pub fn describe(&self) -> String {
        let n_lin = self
            .fixed_columns
            .iter()
            .filter(|k| !matches!(k, ColumnKind::Power { .. }))
            .count();
        let mut s = format!("mu + log(E_it) + sum_{{j=1}}^{{{n_lin}}} beta_j x_jit");
        if self.poly_degree > 1 {
            s += &format!(
                " + sum_{{j=1}}^{{3}} sum_{{k=2}}^{{{}}} beta_jk x_jit^k",
                self.poly_degree
            );
        }
        let t = match self.temporal_resolution {
            Some(TemporalResolution::Weekly) => "w(t)",
            _ => "t",
        };
        for b in &self.random_blocks {
            s += &match b.role {
                EffectRole::SpatialStructured => " + u_i".to_string(),
                EffectRole::SpatialUnstructured => " + v_i".to_string(),
                EffectRole::TemporalStructured => format!(" + gamma_{t}"),
                EffectRole::TemporalUnstructured => format!(" + phi_{t}"),
                EffectRole::Interaction => format!(
                    " + delta_i{t} ({})",
                    self.interaction_kind.map(|k| k.numeral()).unwrap_or("?")
                ),
            };
        }
        s
    }

    pub fn design(&self, panel: &Panel) -> Result<Design> {
        Design::new(self, panel)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Model {}: {}", self.model_id, self.describe())
    }
}

/// Panel data laid out for fast likelihood evaluation under one model.
#[derive(Debug, Clone)]
pub struct Design {
    pub n_regions: usize,
    pub n_days: usize,
    pub n_time: usize,
    /// Covariate values, one row of `p − 1` entries per cell (intercept implicit).
    pub x: Vec<f64>,
    pub n_cov: usize,
    pub log_offset: Vec<f64>,
    pub observed: Vec<f64>,
    /// False for structural zeros (`E_it = 0`).
    pub included: Vec<bool>,
    pub ln_fact: Vec<f64>,
    pub day_to_time: Vec<usize>,
}

impl Design {
    pub fn new(spec: &ModelSpec, panel: &Panel) -> Result<Self> {
        if panel.region_ids != spec.region_ids || panel.n_days() != spec.day_to_time.len() {
            return Err(Error::Mismatch(
                "panel does not match the model it was built for".into(),
            ));
        }
        let cells = panel.n_cells();
        let n_cov = spec.fixed_columns.len();
        let cols: Vec<&[f64]> = spec
            .fixed_columns
            .iter()
            .map(|k| {
                panel
                    .column(*k)
                    .map(|c| c.values.as_slice())
                    .ok_or_else(|| Error::Mismatch(format!("panel lacks `{}`", k.label())))
            })
            .collect::<Result<_>>()?;
        let mut x = Vec::with_capacity(cells * n_cov);
        for c in 0..cells {
            for col in &cols {
                x.push(col[c]);
            }
        }
        let mut log_offset = Vec::with_capacity(cells);
        let mut included = Vec::with_capacity(cells);
        for (c, &e) in panel.expected.iter().enumerate() {
            if !(e >= 0.0 && e.is_finite()) {
                let (i, t) = (c / panel.n_days(), c % panel.n_days());
                return Err(Error::NonFinite(format!(
                    "expected count {e} at region `{}`, day {}",
                    panel.region_ids[i], panel.days[t]
                )));
            }
            included.push(e > 0.0);
            log_offset.push(e.ln());
        }
        Ok(Self {
            n_regions: panel.n_regions(),
            n_days: panel.n_days(),
            n_time: spec.time_labels.len(),
            x,
            n_cov,
            log_offset,
            observed: panel.observed.iter().map(|&o| o as f64).collect(),
            included,
            ln_fact: panel.observed.iter().map(|&o| ln_factorial(o)).collect(),
            day_to_time: spec.day_to_time.clone(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_regions * self.n_days
    }

    #[inline]
    pub fn covariates(&self, cell: usize) -> &[f64] {
        &self.x[cell * self.n_cov..(cell + 1) * self.n_cov]
    }

    /// Fixed part `μ + Σ_j β_j x_jit` for every cell (offset excluded).
    pub fn fixed_part(&self, fixed: &[f64]) -> Vec<f64> {
        (0..self.n_cells())
            .map(|c| {
                self.covariates(c)
                    .iter()
                    .zip(&fixed[1..])
                    .fold(fixed[0], |acc, (x, b)| acc + x * b)
            })
            .collect()
    }

    /// Random-effect contribution per cell.
    pub fn random_part(&self, spec: &ModelSpec, params: &ParameterVector) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cells()];
        for b in &spec.random_blocks {
            let x = params.segment(Segment::Effect(b.role));
            for (c, o) in out.iter_mut().enumerate() {
                let (i, d) = (c / self.n_days, c % self.n_days);
                *o += x[b.index_map.position(i, self.day_to_time[d])];
            }
        }
        out
    }

    /// `log η_it`, summed in a fixed order: offset, intercept, covariates,
    /// then effect blocks in registry order.
    pub fn log_eta(&self, spec: &ModelSpec, params: &ParameterVector) -> Vec<f64> {
        let fixed = params.segment(Segment::Fixed);
        let mut eta: Vec<f64> = (0..self.n_cells())
            .map(|c| {
                self.covariates(c)
                    .iter()
                    .zip(&fixed[1..])
                    .fold(self.log_offset[c] + fixed[0], |acc, (x, b)| acc + x * b)
            })
            .collect();
        for b in &spec.random_blocks {
            let x = params.segment(Segment::Effect(b.role));
            for (c, e) in eta.iter_mut().enumerate() {
                let (i, d) = (c / self.n_days, c % self.n_days);
                *e += x[b.index_map.position(i, self.day_to_time[d])];
            }
        }
        eta
    }

    /// Poisson log-likelihood from `log η`, skipping structural zeros.
    /// `NaN` propagates; overflowing `η` gives `−∞`.
    pub fn log_likelihood_from(&self, log_eta: &[f64]) -> f64 {
        let mut total = 0.0;
        for c in 0..log_eta.len() {
            if self.included[c] {
                total += self.cell_log_likelihood(c, log_eta[c]);
            }
        }
        total
    }

    #[inline]
    pub fn cell_log_likelihood(&self, c: usize, log_eta: f64) -> f64 {
        let o = self.observed[c];
        let term = if o == 0.0 { 0.0 } else { o * log_eta };
        term - log_eta.exp() - self.ln_fact[c]
    }
}

fn check_params(spec: &ModelSpec, params: &ParameterVector) -> Result<()> {
    if *params.registry != *spec.registry || params.values.len() != spec.registry.len() {
        return Err(Error::Mismatch(
            "parameter vector does not match the model registry".into(),
        ));
    }
    Ok(())
}

/// `η_it = E_it · r_it`, region-major with day fastest.
pub fn linear_predictor(spec: &ModelSpec, params: &ParameterVector, panel: &Panel) -> Result<Vec<f64>> {
    check_params(spec, params)?;
    let design = Design::new(spec, panel)?;
    Ok(design.log_eta(spec, params).into_iter().map(f64::exp).collect())
}

pub fn log_likelihood(spec: &ModelSpec, params: &ParameterVector, panel: &Panel) -> Result<f64> {
    check_params(spec, params)?;
    let design = Design::new(spec, panel)?;
    let log_eta = design.log_eta(spec, params);
    for (c, le) in log_eta.iter().enumerate() {
        if design.included[c] && !(le.is_finite() && le.exp().is_finite()) {
            return Err(Error::NonFinite(format!(
                "linear predictor {} at region `{}`, day {}",
                le.exp(),
                panel.region_ids[c / panel.n_days()],
                panel.days[c % panel.n_days()]
            )));
        }
    }
    Ok(design.log_likelihood_from(&log_eta))
}
