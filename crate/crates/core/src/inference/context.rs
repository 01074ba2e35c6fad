use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gmrf::{EffectRole, GammaPrior, StructureMatrix};
use crate::linalg::{BandMatrix, BandedCholesky};
use crate::model::{Design, FixedEffectPrior, ModelSpec, ParameterVector, Segment};

/// Constraint rows `A` with both row and column access to the nonzeros.
#[derive(Debug, Clone)]
pub(crate) struct SparseConstraints {
    rows: Vec<Vec<(usize, f64)>>,
    cols: Vec<Vec<(usize, f64)>>,
}

impl SparseConstraints {
    fn from_dense(a: &nalgebra::DMatrix<f64>) -> Self {
        let mut rows = vec![Vec::new(); a.nrows()];
        let mut cols = vec![Vec::new(); a.ncols()];
        for r in 0..a.nrows() {
            for c in 0..a.ncols() {
                let v = a[(r, c)];
                if v != 0.0 {
                    rows[r].push((c, v));
                    cols[c].push((r, v));
                }
            }
        }
        Self { rows, cols }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Projects `delta` (nonzero only on `support`) onto `{A x = 0}`,
    /// extending `support` with every position the projection touches.
    pub fn project(&self, delta: &mut [f64], support: &mut Vec<usize>, mark: &mut [bool], coef: &mut [f64]) {
        if self.rows.is_empty() {
            return;
        }
        coef.iter_mut().for_each(|c| *c = 0.0);
        for &j in support.iter() {
            let d = delta[j];
            for &(r, a) in &self.cols[j] {
                coef[r] += a * d;
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            let k = coef[r];
            if k == 0.0 {
                continue;
            }
            for &(j, a) in row {
                delta[j] -= k * a;
                if !mark[j] {
                    mark[j] = true;
                    support.push(j);
                }
            }
        }
    }

    pub fn project_full(&self, x: &mut [f64]) {
        for row in &self.rows {
            let k: f64 = row.iter().map(|&(j, a)| a * x[j]).sum();
            if k != 0.0 {
                for &(j, a) in row {
                    x[j] -= k * a;
                }
            }
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }
}

/// Contiguous run of positions updated jointly.
#[derive(Debug, Clone)]
pub(crate) struct SubBlock {
    pub range: Range<usize>,
    pub bandwidth: usize,
    pub name: String,
}

/// A fixed-effect column that is a function of a block's position, so that
/// `β_k += c, x −= c·z` leaves the predictor unchanged.
#[derive(Debug, Clone)]
pub(crate) struct Ridge {
    pub fixed_index: usize,
    pub z: Vec<f64>,
    pub z_norm2: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockLayout {
    pub role: EffectRole,
    pub offset: usize,
    pub dim: usize,
    pub tau_index: usize,
    pub structure: Arc<StructureMatrix<f64>>,
    pub rank: usize,
    pub prior: GammaPrior,
    pub cells_of: Vec<Vec<u32>>,
    /// Observed-count information per position (plus one).
    pub info: Vec<f64>,
    pub constraints: SparseConstraints,
    pub sub_blocks: Vec<SubBlock>,
    pub ridges: Vec<Ridge>,
}

impl BlockLayout {
    pub fn name(&self) -> &'static str {
        self.role.symbol()
    }

    /// Conditional-precision surrogate `diag(w) + τ R` on a sub-block.
    pub fn band(&self, sb: &SubBlock, tau: f64, weights: &[f64]) -> BandMatrix {
        let r = self.structure.matrix();
        let mut q = BandMatrix::zeros(sb.range.len(), sb.bandwidth);
        for j in sb.range.clone() {
            let lj = j - sb.range.start;
            q.add(lj, lj, weights[j] + 1e-9);
            for (k, v) in r.row(j) {
                if k >= sb.range.start && k <= j {
                    q.add(lj, k - sb.range.start, tau * v);
                }
            }
        }
        q
    }

    /// `Σ_j Δ_j (2 (R x)_j + (R Δ)_j)` over the support of `Δ`, i.e.
    /// `(x+Δ)ᵀR(x+Δ) − xᵀRx`.
    pub fn quad_change(&self, x: &[f64], delta: &[f64], support: &[usize]) -> f64 {
        let r = self.structure.matrix();
        let mut total = 0.0;
        for &j in support {
            let d = delta[j];
            if d == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for (k, v) in r.row(j) {
                acc += v * (2.0 * x[k] + delta[k]);
            }
            total += d * acc;
        }
        total
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FixedLayout {
    pub dim: usize,
    /// Factor of the observed-count Fisher information `Σ_c w_c x̃_c x̃_cᵀ`.
    pub fisher: BandedCholesky,
    pub prior_precision: f64,
}

#[derive(Debug)]
pub(crate) struct Context<'a> {
    pub spec: &'a ModelSpec,
    pub design: Design,
    pub fixed: FixedLayout,
    pub blocks: Vec<BlockLayout>,
}

fn bandwidth_of(structure: &StructureMatrix<f64>, range: &Range<usize>) -> usize {
    let r = structure.matrix();
    let mut bw = 0;
    for j in range.clone() {
        for (k, _) in r.row(j) {
            if range.contains(&k) {
                bw = bw.max(j.abs_diff(k));
            }
        }
    }
    bw
}

impl<'a> Context<'a> {
    pub fn new(spec: &'a ModelSpec, design: Design, delta_block_regions: usize) -> Result<Self> {
        let p = spec.n_fixed();
        let prior_precision = match spec.fixed_prior {
            FixedEffectPrior::Flat => 0.0,
            FixedEffectPrior::Normal { variance } => 1.0 / variance,
        };
        let mut fisher = BandMatrix::zeros(p, p.saturating_sub(1));
        let mut xt = vec![0.0; p];
        for c in 0..design.n_cells() {
            if !design.included[c] {
                continue;
            }
            let w = design.observed[c].max(0.5);
            xt[0] = 1.0;
            xt[1..].copy_from_slice(design.covariates(c));
            for i in 0..p {
                for j in 0..=i {
                    fisher.add(i, j, w * xt[i] * xt[j]);
                }
            }
        }
        let scale = (0..p).map(|i| fisher.get(i, i)).fold(0.0f64, f64::max);
        for i in 0..p {
            fisher.add(i, i, prior_precision + 1e-10 * scale.max(1.0));
        }
        let fisher = BandedCholesky::factor(fisher).map_err(|_| {
            Error::Singular("fixed-effect design is rank deficient (collinear or constant covariate)".into())
        })?;

        let n_days = design.n_days;
        let mut blocks = Vec::new();
        for b in &spec.random_blocks {
            let offset = spec
                .registry
                .range(Segment::Effect(b.role))
                .expect("registry holds every block")
                .start;
            let tau_index = spec
                .registry
                .range(Segment::LogPrecision(b.role))
                .expect("registry holds every precision")
                .start;
            let dim = b.dim();
            let mut cells_of = vec![Vec::new(); dim];
            for c in 0..design.n_cells() {
                let (i, d) = (c / n_days, c % n_days);
                cells_of[b.index_map.position(i, design.day_to_time[d])].push(c as u32);
            }
            let info: Vec<f64> = cells_of
                .iter()
                .map(|cs| {
                    1.0 + cs
                        .iter()
                        .filter(|&&c| design.included[c as usize])
                        .map(|&c| design.observed[c as usize])
                        .sum::<f64>()
                })
                .collect();
            let constraints = SparseConstraints::from_dense(b.constraints.matrix());

            let ranges: Vec<Range<usize>> = match b.index_map {
                crate::gmrf::IndexMap::RegionTime { n_regions, n_time } => {
                    let step = delta_block_regions.max(1);
                    (0..n_regions)
                        .step_by(step)
                        .map(|i| i * n_time..((i + step).min(n_regions)) * n_time)
                        .collect()
                }
                _ => vec![0..dim],
            };
            let sub_blocks = ranges
                .into_iter()
                .map(|range| SubBlock {
                    bandwidth: bandwidth_of(&b.structure, &range),
                    name: if range.len() == dim {
                        b.role.symbol().to_string()
                    } else {
                        format!("{}[{}..{}]", b.role.symbol(), range.start, range.end)
                    },
                    range,
                })
                .collect();

            let mut ridges = Vec::new();
            if constraints.is_empty() {
                for k in 0..p {
                    let mut z = vec![f64::NAN; dim];
                    let mut consistent = true;
                    for (pos, cs) in cells_of.iter().enumerate() {
                        for &c in cs {
                            let v = if k == 0 {
                                1.0
                            } else {
                                design.covariates(c as usize)[k - 1]
                            };
                            if z[pos].is_nan() {
                                z[pos] = v;
                            } else if z[pos] != v {
                                consistent = false;
                            }
                        }
                    }
                    if !consistent {
                        continue;
                    }
                    z.iter_mut().filter(|v| v.is_nan()).for_each(|v| *v = 0.0);
                    let z_norm2: f64 = z.iter().map(|v| v * v).sum();
                    if z_norm2 > 0.0 {
                        ridges.push(Ridge {
                            fixed_index: k,
                            z,
                            z_norm2,
                        });
                    }
                }
            }

            blocks.push(BlockLayout {
                role: b.role,
                offset,
                dim,
                tau_index,
                structure: b.structure.clone(),
                rank: b.structure.rank(),
                prior: b.precision_prior,
                cells_of,
                info,
                constraints,
                sub_blocks,
                ridges,
            });
        }
        Ok(Self {
            spec,
            design,
            fixed: FixedLayout {
                dim: p,
                fisher,
                prior_precision,
            },
            blocks,
        })
    }

    pub fn params(&self, values: Vec<f64>) -> ParameterVector {
        ParameterVector {
            registry: self.spec.registry.clone(),
            values,
        }
    }

    pub fn log_eta(&self, values: &[f64]) -> Vec<f64> {
        self.design.log_eta(self.spec, &self.params(values.to_vec()))
    }

    #[inline]
    pub fn cell_ll(&self, c: usize, le: f64) -> f64 {
        if le == f64::INFINITY {
            f64::NEG_INFINITY
        } else {
            self.design.cell_log_likelihood(c, le)
        }
    }

    pub fn log_likelihood(&self, log_eta: &[f64]) -> f64 {
        let mut total = 0.0;
        for (c, &le) in log_eta.iter().enumerate() {
            if self.design.included[c] {
                total += self.cell_ll(c, le);
            }
        }
        total
    }

    pub fn max_block_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).max().unwrap_or(0)
    }

    pub fn max_constraint_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.constraints.n_rows()).max().unwrap_or(0)
    }

    /// Log-likelihood change from adding `delta` (on `support`) to block `b`;
    /// new predictor values are written to `new_le`.
    pub fn block_ll_change(
        &self,
        b: &BlockLayout,
        delta: &[f64],
        support: &[usize],
        log_eta: &[f64],
        new_le: &mut Vec<(u32, f64)>,
    ) -> f64 {
        new_le.clear();
        let mut diff = 0.0;
        for &j in support {
            let d = delta[j];
            if d == 0.0 {
                continue;
            }
            for &c in &b.cells_of[j] {
                let cu = c as usize;
                let le = log_eta[cu] + d;
                if self.design.included[cu] {
                    diff += self.cell_ll(cu, le) - self.cell_ll(cu, log_eta[cu]);
                }
                new_le.push((c, le));
            }
        }
        diff
    }
}
