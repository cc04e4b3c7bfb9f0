//! Runs the MCMC sampler from a Laplace fit and prints chain diagnostics.

use stjm::gmrf::Variant;
use stjm::laplace::{fit, FitOptions};
use stjm::mcmc::{diagnostics, run_mcmc_with, McmcOptions};
use stjm::model::{build_model, ModelConfig};
use stjm::simulate::{simulate_temporal, SimConfig};

fn main() -> stjm::Result<()> {
    let cfg = SimConfig {
        n_loans: 100,
        seed: Some(5),
        ..SimConfig::default()
    };
    let (data, _) = simulate_temporal(&cfg)?;
    let mc = ModelConfig {
        covariates: vec!["z1".into(), "z2".into()],
        ..ModelConfig::default()
    };
    let model = build_model(data, None, Variant::M1, mc)?;
    let f = fit(&model, &FitOptions::default())?;

    let opts = McmcOptions {
        iterations: 3000,
        burn_in: 500,
        thin: 5,
        seed: 5,
        initial_theta: Some(f.theta_mode.clone()),
        proposal_covariance: Some(f.theta_covariance.clone()),
        ..McmcOptions::default()
    };
    let chain = run_mcmc_with(&model, &opts)?;
    let d = diagnostics(&chain, &[("nu0".into(), model.layout.nu0())])?;
    println!("{} draws, acceptance {:?}", d.draws, d.acceptance);
    for p in &d.params {
        println!("{:<8} ESS {:>7.1}", p.name, p.ess);
    }
    for s in chain.hyper_summaries() {
        let l = f.hyper_summary(&s.name).expect("same hyperparameters");
        println!("{:<8} mcmc {:>8.4} ({:.4})  laplace {:>8.4} ({:.4})", s.name, s.mean, s.sd, l.mean, l.sd);
    }
    Ok(())
}
