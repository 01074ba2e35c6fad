//! Metropolis-within-Gibbs fitting, DIC and posterior summaries.
//!
//! Each sweep updates the fixed effects as one random-walk block, every
//! latent effect (the interaction in region slices) as preconditioned
//! random-walk blocks projected onto their constraints, and each precision
//! by its conjugate Gamma full conditional. Step sizes adapt during burn-in
//! only. Chains run in parallel on independent ChaCha streams.

mod context;
mod sampler;
mod summary;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataprep::Panel;
use crate::error::{Error, Result};
use crate::model::{Design, ModelSpec, ParameterVector, Registry, Segment};

use context::Context;
use sampler::{newton_mode, Chain};

pub use sampler::sample_precision;
pub use summary::{
    compare_models, deviance, dic, posterior_summary, read_comparison_csv, write_comparison_csv, ComparisonRow,
    DicResult, FitSummary, ParameterSummary, RHAT_THRESHOLD,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    /// Regions per interaction sub-block.
    pub delta_block_regions: usize,
    pub target_accept_block: f64,
    pub target_accept_scalar: f64,
    /// Starting precision for the mode search that initialises chains.
    pub initial_precision: f64,
    /// Fraction of kept draws re-checked against the constraints.
    pub constraint_check_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_iterations: 20_000,
            burn_in: 10_000,
            thinning: 5,
            seed: 1,
            delta_block_regions: 1,
            target_accept_block: 0.234,
            target_accept_scalar: 0.44,
            initial_precision: 10.0,
            constraint_check_fraction: 0.01,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 2 {
            return Err(Error::Config(
                "at least 2 chains are needed for convergence diagnostics".into(),
            ));
        }
        if self.burn_in >= self.n_iterations {
            return Err(Error::Config(format!(
                "burn-in {} must be below the iteration count {}",
                self.burn_in, self.n_iterations
            )));
        }
        if self.thinning == 0 || self.delta_block_regions == 0 {
            return Err(Error::Config("thinning and delta block size must be positive".into()));
        }
        for t in [self.target_accept_block, self.target_accept_scalar] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("target acceptance {t} outside (0, 1)")));
            }
        }
        if !(self.initial_precision > 0.0) {
            return Err(Error::Config("initial precision must be positive".into()));
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        (self.n_iterations - self.burn_in).div_ceil(self.thinning)
    }
}

/// Kept draws of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSamples {
    /// Row-major `kept × dim`.
    pub draws: Vec<f64>,
    pub deviance: Vec<f64>,
    /// Post-burn-in acceptance rate per update block.
    pub acceptance: BTreeMap<String, f64>,
}

impl ChainSamples {
    pub fn n_kept(&self) -> usize {
        self.deviance.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub model_id: u8,
    pub lag_days: u32,
    pub poly_degree: u8,
    pub registry: Arc<Registry>,
    pub chains: Vec<ChainSamples>,
    pub config: SamplerConfig,
}

impl PosteriorSamples {
    pub fn dim(&self) -> usize {
        self.registry.len()
    }

    pub fn n_kept(&self) -> usize {
        self.chains.iter().map(ChainSamples::n_kept).sum()
    }

    pub fn draw(&self, chain: usize, k: usize) -> &[f64] {
        let d = self.dim();
        &self.chains[chain].draws[k * d..(k + 1) * d]
    }

    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let d = self.dim();
        self.chains.iter().flat_map(move |c| c.draws.chunks_exact(d))
    }

    /// Draws of parameter `index`, one vector per chain.
    pub fn parameter_chains(&self, index: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        self.chains
            .iter()
            .map(|c| c.draws.iter().skip(index).step_by(d).copied().collect())
            .collect()
    }

    pub fn parameter(&self, index: usize) -> Vec<f64> {
        self.parameter_chains(index).concat()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.registry.index_of(label)
    }

    /// Componentwise posterior mean. Precisions are stored as `log τ`, so
    /// their mean is taken on the log scale.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for draw in self.iter_draws() {
            for (a, v) in m.iter_mut().zip(draw) {
                *a += v;
            }
        }
        let n = self.n_kept() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn to_parameters(&self, values: Vec<f64>) -> ParameterVector {
        ParameterVector {
            registry: self.registry.clone(),
            values,
        }
    }

    /// Writes `chain_<k>.csv` (labels plus `deviance`) and `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let d = self.dim();
        for (k, chain) in self.chains.iter().enumerate() {
            let mut w = csv::Writer::from_path(dir.join(format!("chain_{k}.csv")))?;
            let mut header: Vec<&str> = self.registry.labels().iter().map(String::as_str).collect();
            header.push("deviance");
            w.write_record(&header)?;
            for (row, dev) in chain.draws.chunks_exact(d).zip(&chain.deviance) {
                let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                rec.push(dev.to_string());
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        let manifest = Manifest {
            model_id: self.model_id,
            lag_days: self.lag_days,
            poly_degree: self.poly_degree,
            n_chains: self.chains.len(),
            kept_per_chain: self.chains.iter().map(ChainSamples::n_kept).collect(),
            registry: (*self.registry).clone(),
            config: self.config.clone(),
            acceptance: self.chains.iter().map(|c| c.acceptance.clone()).collect(),
            extra,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let d = manifest.registry.len();
        let mut chains = Vec::with_capacity(manifest.n_chains);
        for k in 0..manifest.n_chains {
            let mut rdr = csv::Reader::from_path(dir.join(format!("chain_{k}.csv")))?;
            let header = rdr.headers()?.clone();
            if header.len() != d + 1
                || header
                    .iter()
                    .take(d)
                    .zip(manifest.registry.labels())
                    .any(|(a, b)| a != b)
                || &header[d] != "deviance"
            {
                return Err(Error::Parse(format!(
                    "chain_{k}.csv header does not match the manifest registry"
                )));
            }
            let mut draws = Vec::new();
            let mut deviance = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                for (j, field) in rec.iter().enumerate() {
                    let v: f64 = field
                        .parse()
                        .map_err(|_| Error::Parse(format!("chain_{k}.csv: bad number `{field}`")))?;
                    if j < d {
                        draws.push(v);
                    } else {
                        deviance.push(v);
                    }
                }
            }
            chains.push(ChainSamples {
                draws,
                deviance,
                acceptance: manifest.acceptance.get(k).cloned().unwrap_or_default(),
            });
        }
        Ok((
            Self {
                model_id: manifest.model_id,
                lag_days: manifest.lag_days,
                poly_degree: manifest.poly_degree,
                registry: Arc::new(manifest.registry),
                chains,
                config: manifest.config,
            },
            manifest.extra,
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model_id: u8,
    lag_days: u32,
    poly_degree: u8,
    n_chains: usize,
    kept_per_chain: Vec<usize>,
    registry: Registry,
    config: SamplerConfig,
    acceptance: Vec<BTreeMap<String, f64>>,
    #[serde(default)]
    extra: serde_json::Value,
}

fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn initial_mode(ctx: &Context<'_>, config: &SamplerConfig) -> Result<Vec<f64>> {
    let mut values = vec![0.0; ctx.spec.registry.len()];
    for b in &ctx.blocks {
        values[b.tau_index] = config.initial_precision.ln();
    }
    newton_mode(ctx, &mut values, 100)?;
    if !ctx.blocks.is_empty() {
        for b in &ctx.blocks {
            let q = b.structure.matrix().quad_form(&values[b.offset..b.offset + b.dim]);
            let tau = (b.prior.shape + 0.5 * b.rank as f64) / (b.prior.rate + 0.5 * q);
            values[b.tau_index] = tau.clamp(1e-3, 1e8).ln();
        }
        newton_mode(ctx, &mut values, 100)?;
    }
    Ok(values)
}

/// Posterior mode of the fixed and latent effects at the given log
/// precisions (one per random block, in block order), by block-coordinate
/// Newton iterations. With no random blocks and a flat prior this is the
/// Poisson maximum-likelihood estimate.
pub fn posterior_mode(spec: &ModelSpec, panel: &Panel, log_precisions: &[f64]) -> Result<ParameterVector> {
    if log_precisions.len() != spec.random_blocks.len() {
        return Err(Error::Mismatch(format!(
            "{} log precisions for {} random blocks",
            log_precisions.len(),
            spec.random_blocks.len()
        )));
    }
    let ctx = Context::new(spec, Design::new(spec, panel)?, 1)?;
    let mut values = vec![0.0; spec.registry.len()];
    for (b, lt) in ctx.blocks.iter().zip(log_precisions) {
        values[b.tau_index] = *lt;
    }
    newton_mode(&ctx, &mut values, 500)?;
    Ok(ctx.params(values))
}

fn jittered_start(ctx: &Context<'_>, mode: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut values = mode.to_vec();
    let p = ctx.fixed.dim;
    let mut z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(rng)).collect();
    ctx.fixed.fisher.solve_upper(&mut z);
    for (v, d) in values[..p].iter_mut().zip(&z) {
        *v += d;
    }
    for b in &ctx.blocks {
        let tau = values[b.tau_index].exp();
        let diag = b.structure.matrix().diagonal();
        for j in 0..b.dim {
            let n: f64 = StandardNormal.sample(rng);
            values[b.offset + j] += 0.5 * n / (b.info[j] + tau * diag[j]).sqrt();
        }
        b.constraints.project_full(&mut values[b.offset..b.offset + b.dim]);
        let n: f64 = StandardNormal.sample(rng);
        values[b.tau_index] += 0.3 * n;
    }
    values
}

fn run_chain(ctx: &Context<'_>, config: &SamplerConfig, mode: &[f64], index: usize) -> Result<ChainSamples> {
    let mut rng = chain_rng(config.seed, index as u64);
    let start = jittered_start(ctx, mode, &mut rng);
    let mut chain = Chain::new(
        ctx,
        index,
        start,
        rng,
        config.target_accept_block,
        config.target_accept_scalar,
    );
    let dim = ctx.spec.registry.len();
    let kept = config.kept_per_chain();
    let mut draws = Vec::with_capacity(kept * dim);
    let mut deviance = Vec::with_capacity(kept);
    for it in 0..config.n_iterations {
        let adapt = it < config.burn_in;
        chain.sweep(adapt)?;
        if adapt && it % 100 == 99 {
            chain.refresh();
        }
        if !adapt && (it - config.burn_in) % config.thinning == 0 {
            chain.refresh();
            let ll = ctx.log_likelihood(&chain.log_eta);
            if ll.is_nan() {
                return Err(Error::Divergence {
                    block: "likelihood".into(),
                    chain: index,
                    iteration: it,
                });
            }
            draws.extend_from_slice(&chain.values);
            deviance.push(-2.0 * ll);
        }
    }
    let mut acceptance = BTreeMap::new();
    acceptance.insert(chain.fixed_adapter.name.clone(), chain.fixed_adapter.acceptance_rate());
    for adapters in &chain.block_adapters {
        for a in adapters {
            acceptance.insert(a.name.clone(), a.acceptance_rate());
        }
    }
    let samples = ChainSamples {
        draws,
        deviance,
        acceptance,
    };
    check_constraints(ctx, &samples, config, index)?;
    Ok(samples)
}

fn check_constraints(ctx: &Context<'_>, samples: &ChainSamples, config: &SamplerConfig, index: usize) -> Result<()> {
    if ctx.blocks.is_empty() || samples.n_kept() == 0 {
        return Ok(());
    }
    let mut rng = chain_rng(config.seed ^ 0x9e37_79b9_7f4a_7c15, index as u64);
    let n = samples.n_kept();
    let checks = ((n as f64 * config.constraint_check_fraction).ceil() as usize).clamp(1, n);
    let dim = ctx.spec.registry.len();
    for _ in 0..checks {
        let k = rng.random_range(0..n);
        let draw = &samples.draws[k * dim..(k + 1) * dim];
        for (b, spec_block) in ctx.blocks.iter().zip(&ctx.spec.random_blocks) {
            let residual = spec_block.constraints.residual(&draw[b.offset..b.offset + b.dim]);
            if residual > 1e-8 {
                return Err(Error::ConstraintViolation {
                    block: b.name().to_string(),
                    residual,
                });
            }
            if !draw[b.tau_index].exp().is_finite() || draw[b.tau_index].exp() <= 0.0 {
                return Err(Error::NonFinite(format!("precision draw for `{}`", b.name())));
            }
        }
    }
    Ok(())
}

/// Runs `config.n_chains` chains in parallel and collects the kept draws.
pub fn fit_mcmc(spec: &ModelSpec, panel: &Panel, config: &SamplerConfig) -> Result<PosteriorSamples> {
    config.validate()?;
    let ctx = Context::new(spec, Design::new(spec, panel)?, config.delta_block_regions)?;
    let mode = initial_mode(&ctx, config)?;
    info!(
        "model {}: {} parameters, {} chains × {} iterations",
        spec.model_id,
        spec.registry.len(),
        config.n_chains,
        config.n_iterations
    );
    let chains = (0..config.n_chains)
        .into_par_iter()
        .map(|k| run_chain(&ctx, config, &mode, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSamples {
        model_id: spec.model_id,
        lag_days: spec.lag_days,
        poly_degree: spec.poly_degree,
        registry: spec.registry.clone(),
        chains,
        config: config.clone(),
    })
}

/// Columns of `samples` belonging to `seg`, as a range.
pub fn segment_range(samples: &PosteriorSamples, seg: Segment) -> Option<std::ops::Range<usize>> {
    samples.registry.range(seg)
}

#[cfg(test)]
mod tests;
