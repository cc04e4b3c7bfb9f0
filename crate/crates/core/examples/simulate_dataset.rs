//! Simulates a non-spatial and a spatial dataset and prints their at-risk profiles.

use stjm::graph::AdjacencyGraph;
use stjm::simulate::{area_event_rates, at_risk_profile, morans_i, simulate_temporal, simulate_stjm, SimConfig};

fn main() -> stjm::Result<()> {
    let cfg = SimConfig {
        seed: Some(7),
        ..SimConfig::default()
    };
    let (data, truth) = simulate_temporal(&cfg)?;
    let times = [12, 18, 24, 30, 36];
    println!("{} loans, {} person-months", data.n_loans(), data.n_rows());
    println!("at risk at {times:?}: {:?}", at_risk_profile(&data, &times));
    println!("true nu0 = {}, beta2 = {:?}", truth.nu0, truth.beta2);

    let graph = AdjacencyGraph::lattice(4, 4)?;
    let mut spatial = cfg.clone();
    spatial.n_loans = 3000;
    spatial.hyper.tau_u = Some(1.0);
    let (data, _) = simulate_stjm(&spatial, &graph)?;
    let rates = area_event_rates(&data, graph.n_areas());
    println!("spatial run: Moran's I of area event rates = {:.3}", morans_i(&rates, &graph)?);
    Ok(())
}
