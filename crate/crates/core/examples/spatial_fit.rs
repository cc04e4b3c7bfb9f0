//! Fits the spatial variant M2 on a 3x3 lattice and breaks the cvDCL down by area.

use stjm::gmrf::Variant;
use stjm::graph::AdjacencyGraph;
use stjm::laplace::{fit, FitOptions};
use stjm::model::{build_model, ModelConfig};
use stjm::selection::{cvdcl_by_area, HMethod, InlaSelector};
use stjm::simulate::{simulate_stjm, SimConfig};

fn main() -> stjm::Result<()> {
    let graph = AdjacencyGraph::lattice(3, 3)?;
    let mut cfg = SimConfig {
        n_loans: 300,
        seed: Some(9),
        ..SimConfig::default()
    };
    cfg.hyper.tau_u = Some(2.0);
    let (data, truth) = simulate_stjm(&cfg, &graph)?;
    let mc = ModelConfig {
        covariates: vec!["z1".into(), "z2".into()],
        ..ModelConfig::default()
    };
    let model = build_model(data, Some(graph.clone()), Variant::M2, mc)?;
    let f = fit(&model, &FitOptions::default())?;
    let u = truth.u.unwrap_or_default();
    for a in 1..=graph.n_areas() {
        let s = f.latent_summary(&format!("u[{a}]")).expect("area effect");
        println!("u[{a}] {:>7.3} ({:.3})  truth {:>7.3}", s.mean, s.sd, u[a - 1]);
    }
    let e = InlaSelector::new(&model, &f)?.cvdcl(12, 10, HMethod::Laplace, 9)?;
    println!("cvDCL at t=12: {:.4}", e.estimate);
    for (area, c) in cvdcl_by_area(&e) {
        println!("  area {area}: {c:.4}");
    }
    Ok(())
}
