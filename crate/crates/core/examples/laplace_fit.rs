//! Fits M1 by the nested Laplace approximation and prints the posterior summaries.

use stjm::gmrf::Variant;
use stjm::laplace::{fit, FitOptions};
use stjm::model::{build_model, ModelConfig};
use stjm::simulate::{simulate_temporal, SimConfig};

fn main() -> stjm::Result<()> {
    let cfg = SimConfig {
        n_loans: 200,
        seed: Some(4),
        ..SimConfig::default()
    };
    let (data, truth) = simulate_temporal(&cfg)?;
    let mc = ModelConfig {
        covariates: vec!["z1".into(), "z2".into()],
        ..ModelConfig::default()
    };
    let model = build_model(data, None, Variant::M1, mc)?;
    let f = fit(&model, &FitOptions::default())?;
    println!("{:?} over {} grid points, {} evaluations", f.strategy, f.grid.len(), f.evaluations);
    for s in &f.hyper {
        println!("{:<10} {:>9.4} ({:.4})", s.name, s.mean, s.sd);
    }
    let truths = [("beta01", truth.beta01), ("beta11", truth.beta11), ("nu0", truth.nu0), ("beta2[z1]", truth.beta2[0]), ("beta2[z2]", truth.beta2[1])];
    for (name, t) in truths {
        let s = f.latent_summary(name).expect("fixed effect");
        println!("{name:<10} {:>9.4} ({:.4})  truth {t}", s.mean, s.sd);
    }
    Ok(())
}
