//! Assembles the latent Gaussian model for M1 and prints its layout and the
//! size of the prior precision at the default hyperparameters.

use stjm::gmrf::Variant;
use stjm::model::{build_model, ModelConfig};
use stjm::simulate::{simulate_temporal, SimConfig};

fn main() -> stjm::Result<()> {
    let cfg = SimConfig {
        n_loans: 100,
        seed: Some(3),
        ..SimConfig::default()
    };
    let (data, _) = simulate_temporal(&cfg)?;
    let mc = ModelConfig {
        covariates: vec!["z1".into(), "z2".into()],
        ..ModelConfig::default()
    };
    let model = build_model(data, None, Variant::M1, mc)?;
    println!("latent dimension {}, {} hyperparameters", model.dim(), model.n_hyper());
    for name in ["U", "beta1", "beta2", "nu0", "v"] {
        if let Some(b) = model.layout.block(name) {
            println!("  block {name:<7} offset {:>4} length {}", b.offset, b.len);
        }
    }
    let h = model.default_initial();
    let q = model.assemble_precision(&h)?;
    println!("prior precision: {} stored upper entries", q.nnz_upper());
    println!("structure ranks [v, u, delta]: {:?}", model.structure_ranks());
    Ok(())
}
