use super::*;
use crate::model::{build_model, ModelOptions};
use crate::synth;

fn small_config(seed: u64) -> SamplerConfig {
    SamplerConfig {
        n_chains: 2,
        n_iterations: 600,
        burn_in: 300,
        thinning: 3,
        seed,
        ..SamplerConfig::default()
    }
}

fn fixture(id: u8, n_days: usize) -> (ModelSpec, Panel) {
    let lat = synth::Lattice::new(2, 3);
    let panel = synth::covariate_panel(&lat.regions, n_days, 7);
    let spec = build_model(id, &panel, &lat.graph, &ModelOptions::default()).unwrap();
    (spec, panel)
}

#[test]
fn config_validation() {
    assert!(SamplerConfig::default().validate().is_ok());
    assert_eq!(SamplerConfig::default().kept_per_chain(), 2000);
    let bad = SamplerConfig {
        burn_in: 20_000,
        ..SamplerConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let one = SamplerConfig {
        n_chains: 1,
        ..SamplerConfig::default()
    };
    assert!(one.validate().is_err());
}

#[test]
fn precision_draw_moments() {
    let mut rng = chain_rng(5, 0);
    let prior = crate::gmrf::GammaPrior::default();
    let draws: Vec<f64> = (0..20_000).map(|_| sample_precision(prior, 8, 3.0, &mut rng)).collect();
    let shape = 1.0 + 4.0;
    let rate = 5e-5 + 1.5;
    let m = crate::stats::mean(&draws);
    let se = (shape / (rate * rate) / draws.len() as f64).sqrt();
    assert!((m - shape / rate).abs() < 4.0 * se);
}

#[test]
fn same_seed_same_draws() {
    let (spec, panel) = fixture(3, 21);
    let a = fit_mcmc(&spec, &panel, &small_config(11)).unwrap();
    let b = fit_mcmc(&spec, &panel, &small_config(11)).unwrap();
    assert_eq!(a, b);
    let c = fit_mcmc(&spec, &panel, &small_config(12)).unwrap();
    assert_ne!(a.chains[0].draws, c.chains[0].draws);
}

#[test]
fn draws_satisfy_constraints() {
    for id in [5u8, 6, 7, 8] {
        let (spec, panel) = fixture(id, 28);
        let s = fit_mcmc(&spec, &panel, &small_config(3)).unwrap();
        for draw in s.iter_draws() {
            for b in &spec.random_blocks {
                let r = spec.registry.range(Segment::Effect(b.role)).unwrap();
                assert!(b.constraints.residual(&draw[r]) <= 1e-8, "model {id}");
                let t = spec.registry.range(Segment::LogPrecision(b.role)).unwrap();
                assert!(draw[t.start].exp() > 0.0);
            }
        }
        for chain in &s.chains {
            for (name, rate) in &chain.acceptance {
                assert!(*rate > 0.02 && *rate < 0.9, "model {id} block {name} acceptance {rate}");
            }
        }
    }
}

#[test]
fn recorded_deviance_matches_recomputation() {
    let (spec, panel) = fixture(4, 21);
    let s = fit_mcmc(&spec, &panel, &small_config(2)).unwrap();
    let mut streamed = 0.0;
    let mut n = 0.0;
    for (k, draw) in s.iter_draws().enumerate() {
        let d = deviance(&spec, &s.to_parameters(draw.to_vec()), &panel).unwrap();
        let recorded = s.chains[k / s.chains[0].n_kept()].deviance[k % s.chains[0].n_kept()];
        assert!((d - recorded).abs() <= 1e-9 * d.abs());
        streamed += d;
        n += 1.0;
    }
    let dic = dic(&s, &spec, &panel).unwrap();
    assert!((dic.mean_deviance - streamed / n).abs() <= 1e-9 * dic.mean_deviance.abs());
    assert!((dic.dic - (dic.deviance_at_mean + 2.0 * dic.p_d)).abs() <= 1e-9 * dic.dic.abs());
}

#[test]
fn model_one_mode_is_stationary() {
    let (spec, panel) = fixture(1, 30);
    let mode = posterior_mode(&spec, &panel, &[]).unwrap();
    let design = Design::new(&spec, &panel).unwrap();
    let le = design.log_eta(&spec, &mode);
    let mut grad = vec![0.0; spec.n_fixed()];
    for c in 0..design.n_cells() {
        let r = design.observed[c] - le[c].exp();
        grad[0] += r;
        for (g, x) in grad[1..].iter_mut().zip(design.covariates(c)) {
            *g += r * x;
        }
    }
    assert!(grad.iter().all(|g| g.abs() < 1e-6), "{grad:?}");
}

#[test]
fn degenerate_posterior_has_zero_pd() {
    let (spec, panel) = fixture(1, 14);
    let mode = posterior_mode(&spec, &panel, &[]).unwrap();
    let d = mode.values.len();
    let chain = |_| ChainSamples {
        draws: mode.values.iter().copied().cycle().take(d * 60).collect(),
        deviance: vec![deviance(&spec, &mode, &panel).unwrap(); 60],
        acceptance: BTreeMap::new(),
    };
    let s = PosteriorSamples {
        model_id: 1,
        lag_days: 0,
        poly_degree: 1,
        registry: spec.registry.clone(),
        chains: (0..2).map(chain).collect(),
        config: small_config(1),
    };
    let r = dic(&s, &spec, &panel).unwrap();
    assert!(r.p_d.abs() < 1e-9);
    assert!((r.dic - r.deviance_at_mean).abs() < 1e-9);
    let summary = posterior_summary(&s);
    assert!(summary.iter().all(|p| p.sd == 0.0 && p.rhat == 1.0 && p.degenerate));
}

#[test]
fn too_few_draws() {
    let (spec, panel) = fixture(1, 14);
    let cfg = SamplerConfig {
        n_iterations: 40,
        burn_in: 10,
        thinning: 1,
        ..small_config(1)
    };
    let s = fit_mcmc(&spec, &panel, &cfg).unwrap();
    assert_eq!(s.n_kept(), 60);
    assert!(matches!(
        dic(&s, &spec, &panel),
        Err(Error::TooFewDraws { needed: 100, got: 60 })
    ));
}

#[test]
fn hand_built_dic() {
    // One cell with O = 2, E = 1; intercept-only draws μ ∈ {0, ln 2, ln 3}.
    let draws = [0.0f64, 2f64.ln(), 3f64.ln()];
    let dev = |mu: f64| -2.0 * (2.0 * mu - mu.exp() - 2f64.ln());
    let mean_dev = draws.iter().map(|m| dev(*m)).sum::<f64>() / 3.0;
    let mu_bar = draws.iter().sum::<f64>() / 3.0;
    let r = DicResult::new(mean_dev, dev(mu_bar));
    let pd = mean_dev - dev(mu_bar);
    assert!((r.p_d - pd).abs() < 1e-12);
    assert!((r.dic - (mean_dev + pd)).abs() < 1e-12);
}

fn summary_with(model_id: u8, dic: f64, flags: &[&str]) -> FitSummary {
    FitSummary {
        model_id,
        lag_days: 7,
        poly_degree: 1,
        dic: DicResult::new(dic * 0.9, dic * 0.8),
        parameters: Vec::new(),
        flags: flags.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn comparison_order_and_flags() {
    let fits = vec![
        summary_with(1, 10.0, &[]),
        summary_with(2, 5.0, &[]),
        summary_with(3, 7.0, &[]),
    ];
    let rows = compare_models(&fits);
    assert_eq!(rows.iter().map(|r| r.model_id).collect::<Vec<_>>(), vec![2, 3, 1]);
    assert_eq!(rows[0].rank, Some(1));

    let fits = vec![summary_with(12, 1.0, &["rhat"]), summary_with(9, 5.0, &[])];
    let rows = compare_models(&fits);
    assert_eq!(rows[0].model_id, 9);
    assert_eq!(rows[1].rank, None);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cmp.csv");
    write_comparison_csv(&path, &rows).unwrap();
    let back = read_comparison_csv(&path).unwrap();
    assert_eq!(back, rows);
}

#[test]
fn save_and_load_roundtrip() {
    let (spec, panel) = fixture(3, 21);
    let s = fit_mcmc(&spec, &panel, &small_config(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    s.save(dir.path(), serde_json::json!({"note": "x"})).unwrap();
    let (back, extra) = PosteriorSamples::load(dir.path()).unwrap();
    assert_eq!(back, s);
    assert_eq!(extra["note"], "x");
}
