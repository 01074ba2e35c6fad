use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PosteriorSamples;
use crate::dataprep::Panel;
use crate::error::{Error, Result};
use crate::model::{log_likelihood, ModelSpec, ParameterVector, Segment};
use crate::stats;

/// Split-R̂ above which a fixed effect marks the fit as unconverged.
pub const RHAT_THRESHOLD: f64 = 1.1;

const MIN_DIC_DRAWS: usize = 100;

/// `D(θ) = −2 log p(O | θ)`.
pub fn deviance(spec: &ModelSpec, params: &ParameterVector, panel: &Panel) -> Result<f64> {
    Ok(-2.0 * log_likelihood(spec, params, panel)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicResult {
    pub dic: f64,
    pub p_d: f64,
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
}

impl DicResult {
    /// `p_D = D̄ − D(θ̄)`, `DIC = D̄ + p_D`.
    pub fn new(mean_deviance: f64, deviance_at_mean: f64) -> Self {
        let p_d = mean_deviance - deviance_at_mean;
        Self {
            dic: mean_deviance + p_d,
            p_d,
            mean_deviance,
            deviance_at_mean,
        }
    }
}

/// DIC from the deviance recorded with every kept draw and the deviance at
/// the componentwise posterior mean (log precisions averaged as stored).
pub fn dic(samples: &PosteriorSamples, spec: &ModelSpec, panel: &Panel) -> Result<DicResult> {
    let n = samples.n_kept();
    if n < MIN_DIC_DRAWS {
        return Err(Error::TooFewDraws {
            needed: MIN_DIC_DRAWS,
            got: n,
        });
    }
    let all: Vec<f64> = samples.chains.iter().flat_map(|c| c.deviance.iter().copied()).collect();
    let mean_deviance = stats::mean(&all);
    let theta_bar = samples.to_parameters(samples.mean());
    Ok(DicResult::new(mean_deviance, deviance(spec, &theta_bar, panel)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub label: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
    pub rhat: f64,
    /// Constant draws; `rhat` is reported as 1.0.
    pub degenerate: bool,
    /// The 95% interval excludes zero.
    pub credible_nonzero: bool,
}

pub fn posterior_summary(samples: &PosteriorSamples) -> Vec<ParameterSummary> {
    (0..samples.dim())
        .map(|k| {
            let chains = samples.parameter_chains(k);
            let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
            let rhat = stats::split_rhat(&refs);
            let all = chains.concat();
            let sorted = stats::sorted(&all);
            let q025 = stats::quantile_sorted(&sorted, 0.025);
            let q975 = stats::quantile_sorted(&sorted, 0.975);
            ParameterSummary {
                label: samples.registry.labels()[k].clone(),
                mean: stats::mean(&all),
                sd: stats::sd(&all),
                q025,
                median: stats::quantile_sorted(&sorted, 0.5),
                q975,
                rhat: rhat.value,
                degenerate: rhat.degenerate,
                credible_nonzero: q025 > 0.0 || q975 < 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub model_id: u8,
    pub lag_days: u32,
    pub poly_degree: u8,
    pub dic: DicResult,
    pub parameters: Vec<ParameterSummary>,
    /// Reasons the fit should not be ranked: `rhat`, `nonfinite_dic`,
    /// `negative_pd`.
    pub flags: Vec<String>,
}

impl FitSummary {
    pub fn new(samples: &PosteriorSamples, spec: &ModelSpec, panel: &Panel) -> Result<Self> {
        let dic = dic(samples, spec, panel)?;
        let parameters = posterior_summary(samples);
        let mut flags = Vec::new();
        let fixed = samples.registry.range(Segment::Fixed).unwrap_or(0..0);
        if parameters[fixed]
            .iter()
            .any(|p| !(p.rhat <= RHAT_THRESHOLD) && !p.degenerate)
        {
            flags.push("rhat".to_string());
        }
        if !dic.dic.is_finite() {
            flags.push("nonfinite_dic".to_string());
        } else if dic.p_d < 0.0 {
            flags.push("negative_pd".to_string());
        }
        Ok(Self {
            model_id: samples.model_id,
            lag_days: samples.lag_days,
            poly_degree: samples.poly_degree,
            dic,
            parameters,
            flags,
        })
    }

    pub fn parameter(&self, label: &str) -> Option<&ParameterSummary> {
        self.parameters.iter().find(|p| p.label == label)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// 1-based DIC rank; `None` for flagged fits.
    pub rank: Option<usize>,
    pub model_id: u8,
    pub lag_days: u32,
    pub dic: f64,
    pub p_d: f64,
    pub flags: Vec<String>,
}

/// Unflagged fits in ascending DIC order, then flagged fits (by model id)
/// without a rank.
pub fn compare_models(fits: &[FitSummary]) -> Vec<ComparisonRow> {
    let row = |f: &FitSummary| ComparisonRow {
        rank: None,
        model_id: f.model_id,
        lag_days: f.lag_days,
        dic: f.dic.dic,
        p_d: f.dic.p_d,
        flags: f.flags.clone(),
    };
    let mut ranked: Vec<ComparisonRow> = fits.iter().filter(|f| !f.is_flagged()).map(row).collect();
    ranked.sort_by(|a, b| a.dic.total_cmp(&b.dic).then(a.model_id.cmp(&b.model_id)));
    for (k, r) in ranked.iter_mut().enumerate() {
        r.rank = Some(k + 1);
    }
    let mut flagged: Vec<ComparisonRow> = fits.iter().filter(|f| f.is_flagged()).map(row).collect();
    flagged.sort_by_key(|r| (r.model_id, r.lag_days));
    ranked.extend(flagged);
    ranked
}

/// `model,lag,DIC,pD,flags` with `;`-joined flags.
pub fn write_comparison_csv(path: impl AsRef<Path>, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "lag", "DIC", "pD", "flags"])?;
    for r in rows {
        w.write_record([
            r.model_id.to_string(),
            r.lag_days.to_string(),
            r.dic.to_string(),
            r.p_d.to_string(),
            r.flags.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_comparison_csv(path: impl AsRef<Path>) -> Result<Vec<ComparisonRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["model", "lag", "DIC", "pD", "flags"] {
        return Err(Error::Parse(
            "comparison table header must be `model,lag,DIC,pD,flags`".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut rank = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| Error::Parse(format!("bad number `{}`", &rec[k])))
        };
        let flags: Vec<String> = rec[4].split(';').filter(|s| !s.is_empty()).map(String::from).collect();
        let ranked = flags.is_empty();
        if ranked {
            rank += 1;
        }
        rows.push(ComparisonRow {
            rank: ranked.then_some(rank),
            model_id: rec[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad model id `{}`", &rec[0])))?,
            lag_days: rec[1]
                .parse()
                .map_err(|_| Error::Parse(format!("bad lag `{}`", &rec[1])))?,
            dic: num(2)?,
            p_d: num(3)?,
            flags,
        });
    }
    Ok(rows)
}
