use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::context::{BlockLayout, Context};
use crate::error::{Error, Result};
use crate::gmrf::GammaPrior;
use crate::linalg::{BandMatrix, BandedCholesky};

/// Draws `τ ~ Gamma(a + rank/2, b + q/2)` (shape, rate), the full
/// conditional of a precision whose effect has quadratic form `q = xᵀRx`.
pub fn sample_precision<R: Rng + ?Sized>(prior: GammaPrior, rank: usize, quad: f64, rng: &mut R) -> f64 {
    let shape = prior.shape + 0.5 * rank as f64;
    let rate = prior.rate + 0.5 * quad.max(0.0);
    Gamma::new(shape, 1.0 / rate)
        .expect("shape and rate are positive")
        .sample(rng)
}

/// Random-walk step-size state for one update block.
#[derive(Debug, Clone)]
pub(crate) struct Adapter {
    pub name: String,
    pub log_scale: f64,
    pub target: f64,
    pub proposed: u64,
    pub accepted: u64,
    pub kept_proposed: u64,
    pub kept_accepted: u64,
}

impl Adapter {
    pub fn new(name: String, dim: usize, block_target: f64, scalar_target: f64) -> Self {
        Self {
            name,
            log_scale: (2.38 / (dim as f64).sqrt()).ln(),
            target: if dim == 1 { scalar_target } else { block_target },
            proposed: 0,
            accepted: 0,
            kept_proposed: 0,
            kept_accepted: 0,
        }
    }

    fn record(&mut self, accept_prob: f64, accepted: bool, adapt: bool) {
        self.proposed += 1;
        if accepted {
            self.accepted += 1;
        }
        if adapt {
            let gain = (self.proposed as f64).powf(-0.6);
            self.log_scale += gain * (accept_prob - self.target);
            self.log_scale = self.log_scale.clamp(-12.0, 3.0);
        } else {
            self.kept_proposed += 1;
            if accepted {
                self.kept_accepted += 1;
            }
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.kept_proposed > 0 {
            self.kept_accepted as f64 / self.kept_proposed as f64
        } else if self.proposed > 0 {
            self.accepted as f64 / self.proposed as f64
        } else {
            f64::NAN
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// One Markov chain: state, cached predictor and scratch space.
pub(crate) struct Chain<'c, 'a> {
    pub ctx: &'c Context<'a>,
    pub index: usize,
    pub values: Vec<f64>,
    pub log_eta: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub fixed_adapter: Adapter,
    pub block_adapters: Vec<Vec<Adapter>>,
    pub iteration: usize,
    delta: Vec<f64>,
    mark: Vec<bool>,
    support: Vec<usize>,
    coef: Vec<f64>,
    new_le: Vec<(u32, f64)>,
}

impl<'c, 'a> Chain<'c, 'a> {
    pub fn new(
        ctx: &'c Context<'a>,
        index: usize,
        values: Vec<f64>,
        rng: ChaCha8Rng,
        block_target: f64,
        scalar_target: f64,
    ) -> Self {
        let log_eta = ctx.log_eta(&values);
        let block_adapters = ctx
            .blocks
            .iter()
            .map(|b| {
                b.sub_blocks
                    .iter()
                    .map(|sb| Adapter::new(sb.name.clone(), sb.range.len(), block_target, scalar_target))
                    .collect()
            })
            .collect();
        let max_dim = ctx.max_block_dim();
        Self {
            ctx,
            index,
            values,
            log_eta,
            rng,
            fixed_adapter: Adapter::new("fixed".into(), ctx.fixed.dim, block_target, scalar_target),
            block_adapters,
            iteration: 0,
            delta: vec![0.0; max_dim],
            mark: vec![false; max_dim],
            support: Vec::with_capacity(max_dim),
            coef: vec![0.0; ctx.max_constraint_rows()],
            new_le: Vec::new(),
        }
    }

    fn divergence(&self, block: &str) -> Error {
        Error::Divergence {
            block: block.to_string(),
            chain: self.index,
            iteration: self.iteration,
        }
    }

    fn accept(&mut self, log_ratio: f64, block: &str) -> Result<(bool, f64)> {
        if log_ratio.is_nan() || log_ratio == f64::INFINITY {
            return Err(self.divergence(block));
        }
        let prob = log_ratio.min(0.0).exp();
        let u: f64 = self.rng.random();
        Ok((u.ln() < log_ratio, prob))
    }

    /// One sweep: fixed effects, every latent sub-block, ridge moves, then
    /// the conjugate precision updates.
    pub fn sweep(&mut self, adapt: bool) -> Result<()> {
        self.update_fixed(adapt)?;
        for b in 0..self.ctx.blocks.len() {
            for s in 0..self.ctx.blocks[b].sub_blocks.len() {
                self.update_sub_block(b, s, adapt)?;
            }
            self.ridge_moves(b);
        }
        for b in 0..self.ctx.blocks.len() {
            self.update_precision(b);
        }
        self.iteration += 1;
        Ok(())
    }

    fn update_fixed(&mut self, adapt: bool) -> Result<()> {
        let ctx = self.ctx;
        let p = ctx.fixed.dim;
        let scale = self.fixed_adapter.log_scale.exp();
        let mut step = standard_normal(&mut self.rng, p);
        ctx.fixed.fisher.solve_upper(&mut step);
        step.iter_mut().for_each(|s| *s *= scale);

        let design = &ctx.design;
        let mut diff = 0.0;
        self.new_le.clear();
        for c in 0..design.n_cells() {
            let shift = design
                .covariates(c)
                .iter()
                .zip(&step[1..])
                .fold(step[0], |acc, (x, d)| acc + x * d);
            let le = self.log_eta[c] + shift;
            if design.included[c] {
                diff += ctx.cell_ll(c, le) - ctx.cell_ll(c, self.log_eta[c]);
            }
            self.new_le.push((c as u32, le));
        }
        let old = &self.values[..p];
        let new: Vec<f64> = old.iter().zip(&step).map(|(a, d)| a + d).collect();
        diff += ctx.spec.fixed_prior.log_density(&new) - ctx.spec.fixed_prior.log_density(old);

        let (accepted, prob) = self.accept(diff, "fixed")?;
        if accepted {
            self.values[..p].copy_from_slice(&new);
            for &(c, le) in &self.new_le {
                self.log_eta[c as usize] = le;
            }
        }
        self.fixed_adapter.record(prob, accepted, adapt);
        Ok(())
    }

    fn update_sub_block(&mut self, b: usize, s: usize, adapt: bool) -> Result<()> {
        let ctx = self.ctx;
        let block: &BlockLayout = &ctx.blocks[b];
        let sb = &block.sub_blocks[s];
        let tau = self.values[block.tau_index].exp();
        let chol =
            BandedCholesky::factor(block.band(sb, tau, &block.info)).map_err(|_| self.divergence(block.name()))?;
        let scale = self.block_adapters[b][s].log_scale.exp();
        let mut z = standard_normal(&mut self.rng, sb.range.len());
        chol.solve_upper(&mut z);

        let x = &self.values[block.offset..block.offset + block.dim];
        self.support.clear();
        for (k, j) in sb.range.clone().enumerate() {
            self.delta[j] = scale * z[k];
            self.mark[j] = true;
            self.support.push(j);
        }
        block
            .constraints
            .project(&mut self.delta, &mut self.support, &mut self.mark, &mut self.coef);

        let quad = block.quad_change(x, &self.delta, &self.support);
        let mut log_ratio = -0.5 * tau * quad;
        log_ratio += ctx.block_ll_change(block, &self.delta, &self.support, &self.log_eta, &mut self.new_le);

        let (accepted, prob) = match self.accept(log_ratio, &sb.name) {
            Ok(r) => r,
            Err(e) => {
                self.clear_scratch();
                return Err(e);
            }
        };
        if accepted {
            for &j in &self.support {
                self.values[block.offset + j] += self.delta[j];
            }
            for &(c, le) in &self.new_le {
                self.log_eta[c as usize] = le;
            }
        }
        self.clear_scratch();
        self.block_adapters[b][s].record(prob, accepted, adapt);
        Ok(())
    }

    fn clear_scratch(&mut self) {
        for &j in &self.support {
            self.delta[j] = 0.0;
            self.mark[j] = false;
        }
        self.support.clear();
    }

    /// Exact Gibbs draws along `β_k += c, x −= c·z`, which leave the
    /// predictor unchanged.
    fn ridge_moves(&mut self, b: usize) {
        let ctx = self.ctx;
        let block = &ctx.blocks[b];
        let tau = self.values[block.tau_index].exp();
        for ridge in &block.ridges {
            let x = &self.values[block.offset..block.offset + block.dim];
            let zx: f64 = ridge.z.iter().zip(x).map(|(z, v)| z * v).sum();
            let beta = self.values[ridge.fixed_index];
            let prec = tau * ridge.z_norm2 + ctx.fixed.prior_precision;
            let mean = (tau * zx - beta * ctx.fixed.prior_precision) / prec;
            let n: f64 = StandardNormal.sample(&mut self.rng);
            let c = mean + n / prec.sqrt();
            self.values[ridge.fixed_index] += c;
            for (j, z) in ridge.z.iter().enumerate() {
                self.values[block.offset + j] -= c * z;
            }
        }
    }

    fn update_precision(&mut self, b: usize) {
        let block = &self.ctx.blocks[b];
        let x = &self.values[block.offset..block.offset + block.dim];
        let quad = block.structure.matrix().quad_form(x);
        let tau = sample_precision(block.prior, block.rank, quad, &mut self.rng);
        self.values[block.tau_index] = tau.ln();
    }

    /// Re-projects latent blocks and recomputes the cached predictor from
    /// scratch.
    pub fn refresh(&mut self) {
        for block in &self.ctx.blocks {
            block
                .constraints
                .project_full(&mut self.values[block.offset..block.offset + block.dim]);
        }
        self.log_eta = self.ctx.log_eta(&self.values);
    }
}

/// Block-coordinate Newton ascent on the log posterior of the fixed and
/// latent effects with precisions held at `values[tau_index]`.
pub(crate) fn newton_mode(ctx: &Context<'_>, values: &mut [f64], max_sweeps: usize) -> Result<()> {
    let mut log_eta = ctx.log_eta(values);
    let mut last = log_posterior(ctx, values, &log_eta);
    if !last.is_finite() {
        return Err(Error::NonFinite("log posterior at the starting point".into()));
    }
    for _ in 0..max_sweeps {
        newton_fixed(ctx, values, &mut log_eta);
        for b in &ctx.blocks {
            for sb in &b.sub_blocks {
                newton_block(ctx, b, sb, values, &mut log_eta);
            }
        }
        for b in &ctx.blocks {
            b.constraints.project_full(&mut values[b.offset..b.offset + b.dim]);
        }
        log_eta = ctx.log_eta(values);
        let now = log_posterior(ctx, values, &log_eta);
        if (now - last).abs() <= 1e-10 * now.abs().max(1.0) {
            break;
        }
        last = now;
    }
    Ok(())
}

fn log_posterior(ctx: &Context<'_>, values: &[f64], log_eta: &[f64]) -> f64 {
    let mut lp = ctx.log_likelihood(log_eta) + ctx.spec.fixed_prior.log_density(&values[..ctx.fixed.dim]);
    for b in &ctx.blocks {
        let tau = values[b.tau_index].exp();
        lp -= 0.5 * tau * b.structure.matrix().quad_form(&values[b.offset..b.offset + b.dim]);
    }
    lp
}

fn newton_fixed(ctx: &Context<'_>, values: &mut [f64], log_eta: &mut [f64]) {
    let p = ctx.fixed.dim;
    let design = &ctx.design;
    let mut h = BandMatrix::zeros(p, p.saturating_sub(1));
    let mut g = vec![0.0; p];
    let mut xt = vec![0.0; p];
    for c in 0..design.n_cells() {
        if !design.included[c] {
            continue;
        }
        let eta = log_eta[c].exp();
        xt[0] = 1.0;
        xt[1..].copy_from_slice(design.covariates(c));
        let r = design.observed[c] - eta;
        for i in 0..p {
            g[i] += r * xt[i];
            for j in 0..=i {
                h.add(i, j, eta * xt[i] * xt[j]);
            }
        }
    }
    for i in 0..p {
        g[i] -= ctx.fixed.prior_precision * values[i];
        h.add(i, i, ctx.fixed.prior_precision + 1e-12);
    }
    let Ok(chol) = BandedCholesky::factor(h) else { return };
    let mut step = g;
    chol.solve(&mut step);
    let objective = |vals: &[f64], le: &[f64]| ctx.log_likelihood(le) + ctx.spec.fixed_prior.log_density(&vals[..p]);
    let base = objective(values, log_eta);
    let mut t = 1.0;
    for _ in 0..30 {
        let trial: Vec<f64> = values[..p].iter().zip(&step).map(|(v, s)| v + t * s).collect();
        let le: Vec<f64> = (0..design.n_cells())
            .map(|c| {
                let shift = design
                    .covariates(c)
                    .iter()
                    .zip(&step[1..])
                    .fold(step[0], |acc, (x, d)| acc + x * d);
                log_eta[c] + t * shift
            })
            .collect();
        let mut full = values.to_vec();
        full[..p].copy_from_slice(&trial);
        if objective(&full, &le) >= base {
            values[..p].copy_from_slice(&trial);
            log_eta.copy_from_slice(&le);
            return;
        }
        t *= 0.5;
    }
}

fn newton_block(
    ctx: &Context<'_>,
    b: &BlockLayout,
    sb: &super::context::SubBlock,
    values: &mut [f64],
    log_eta: &mut [f64],
) {
    let tau = values[b.tau_index].exp();
    let design = &ctx.design;
    let x = values[b.offset..b.offset + b.dim].to_vec();
    let rx = b.structure.matrix().mul_vec(&x);
    let mut weights = vec![0.0; b.dim];
    let mut g = vec![0.0; sb.range.len()];
    for (k, j) in sb.range.clone().enumerate() {
        for &c in &b.cells_of[j] {
            let c = c as usize;
            if design.included[c] {
                let eta = log_eta[c].exp();
                weights[j] += eta;
                g[k] += design.observed[c] - eta;
            }
        }
        g[k] -= tau * rx[j];
        weights[j] += 1e-6;
    }
    let Ok(chol) = BandedCholesky::factor(b.band(sb, tau, &weights)) else {
        return;
    };
    chol.solve(&mut g);

    let mut delta = vec![0.0; b.dim];
    let mut support: Vec<usize> = sb.range.clone().collect();
    let mut mark = vec![false; b.dim];
    for (k, j) in sb.range.clone().enumerate() {
        delta[j] = g[k];
        mark[j] = true;
    }
    let mut coef = vec![0.0; b.constraints.n_rows()];
    b.constraints.project(&mut delta, &mut support, &mut mark, &mut coef);

    let mut new_le = Vec::new();
    let mut t = 1.0;
    for _ in 0..30 {
        let scaled: Vec<f64> = delta.iter().map(|d| d * t).collect();
        let gain = ctx.block_ll_change(b, &scaled, &support, log_eta, &mut new_le)
            - 0.5 * tau * b.quad_change(&x, &scaled, &support);
        if gain >= 0.0 {
            for &j in &support {
                values[b.offset + j] += scaled[j];
            }
            for &(c, le) in &new_le {
                log_eta[c as usize] = le;
            }
            return;
        }
        t *= 0.5;
    }
}
