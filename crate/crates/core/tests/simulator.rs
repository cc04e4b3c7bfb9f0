use statrs::distribution::{ChiSquared, ContinuousCDF};
use stjm::gmrf::Variant;
use stjm::graph::AdjacencyGraph;
use stjm::laplace::{fit, FitOptions};
use stjm::model::{build_model, ModelConfig};
use stjm::simulate::{
    area_event_rates, at_risk_profile, morans_i, simulate_temporal, simulate_stjm, SimConfig,
};

fn config(seed: u64) -> SimConfig {
    SimConfig {
        seed: Some(seed),
        ..SimConfig::default()
    }
}

#[test]
fn huge_spatial_precision_reduces_to_the_temporal_design() {
    let graph = AdjacencyGraph::lattice(3, 3).unwrap();
    let mut cfg = config(21);
    cfg.n_loans = 2000;
    cfg.hyper.tau_u = Some(1e6);
    let (spatial, truth) = simulate_stjm(&cfg, &graph).unwrap();
    let (plain, _) = simulate_temporal(&cfg).unwrap();
    let u = truth.u.unwrap();
    assert!(u.iter().all(|x| x.abs() < 0.01), "u = {u:?}");

    // Per-loan streams are shared, so only loans whose event draw sits within
    // |u| of the hazard can differ.
    let same = spatial
        .loans
        .iter()
        .zip(&plain.loans)
        .filter(|(a, b)| a.duration() == b.duration() && a.prepaid == b.prepaid)
        .count();
    assert!(same as f64 >= 0.99 * cfg.n_loans as f64, "{same} identical loans");
    let mean = |d: &stjm::data::PanelDataset| d.loans.iter().map(|l| l.duration() as f64).sum::<f64>() / d.n_loans() as f64;
    assert!((mean(&spatial) - mean(&plain)).abs() < 0.1);
}

#[test]
fn spatial_effect_produces_positive_morans_i() {
    let graph = AdjacencyGraph::lattice(5, 5).unwrap();
    for seed in [31, 32, 33] {
        let mut cfg = config(seed);
        cfg.n_loans = 5000;
        cfg.hyper.tau_u = Some(1.0);
        let (data, _) = simulate_stjm(&cfg, &graph).unwrap();
        let rates = area_event_rates(&data, graph.n_areas());
        let i = morans_i(&rates, &graph).unwrap();
        assert!(i > 0.0, "seed {seed}: Moran's I = {i}");
    }
}

#[test]
fn area_counts_are_uniform_within_chi_square_tolerance() {
    let graph = AdjacencyGraph::lattice(5, 5).unwrap();
    let mut cfg = config(41);
    cfg.n_loans = 5000;
    cfg.hyper.tau_u = Some(1.0);
    let (data, _) = simulate_stjm(&cfg, &graph).unwrap();
    let a = graph.n_areas();
    let mut counts = vec![0usize; a];
    for l in &data.loans {
        counts[l.area - 1] += 1;
    }
    let expected = cfg.n_loans as f64 / a as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((a - 1) as f64).unwrap().inverse_cdf(0.999);
    assert!(stat < critical, "chi-square {stat} >= {critical}");
}

#[test]
fn weighted_areas_follow_their_weights() {
    let graph = AdjacencyGraph::lattice(1, 2).unwrap();
    let mut cfg = config(42);
    cfg.n_loans = 4000;
    cfg.area_weights = Some(vec![3.0, 1.0]);
    let (data, _) = simulate_stjm(&cfg, &graph).unwrap();
    let first = data.loans.iter().filter(|l| l.area == 1).count() as f64 / 4000.0;
    // Binomial(4000, 0.75): sd ≈ 0.0068.
    assert!((first - 0.75).abs() < 0.03, "share of area 1 = {first}");
}

#[test]
fn default_design_matches_the_target_at_risk_profile() {
    let target = [424.0, 347.0, 183.0, 85.0, 36.0];
    let mut mean = [0.0; 5];
    for seed in 0..10 {
        let (d, _) = simulate_temporal(&config(seed)).unwrap();
        for (m, n) in mean.iter_mut().zip(at_risk_profile(&d, &[12, 18, 24, 30, 36])) {
            *m += n as f64 / 10.0;
        }
    }
    for (m, t) in mean.iter().zip(target) {
        assert!((m / t - 1.0).abs() <= 0.25, "mean N_t {mean:?} vs {target:?}");
    }
}

#[test]
fn fixed_effects_are_recovered_within_three_posterior_sds() {
    let reps = 20;
    let names = ["beta01", "beta11", "beta2[z1]", "beta2[z2]", "nu0"];
    let mut hits = [0usize; 5];
    for seed in 0..reps {
        let mut cfg = config(500 + seed);
        cfg.n_loans = 300;
        let (data, _) = simulate_temporal(&cfg).unwrap();
        let truth = [cfg.beta01, cfg.beta11, cfg.beta2[0], cfg.beta2[1], cfg.nu0];
        let mc = ModelConfig {
            covariates: vec!["z1".into(), "z2".into()],
            ..ModelConfig::default()
        };
        let model = build_model(data, None, Variant::M1, mc).unwrap();
        let f = fit(&model, &FitOptions::default()).unwrap();
        for (k, name) in names.iter().enumerate() {
            let s = f.latent_summary(name).unwrap();
            if (s.mean - truth[k]).abs() <= 3.0 * s.sd {
                hits[k] += 1;
            }
        }
    }
    for (name, h) in names.iter().zip(hits) {
        assert!(h * 10 >= reps as usize * 9, "{name} recovered in {h}/{reps} replications");
    }
}
