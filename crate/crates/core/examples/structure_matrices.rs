//! Builds the RW2, ICAR and interaction structure matrices for a small lattice
//! and the sum-to-zero constraints that go with them.

use stjm::gmrf::{build_constraints, build_icar_structure, build_interaction_structure, build_rw2_structure, Variant};
use stjm::graph::AdjacencyGraph;

fn main() -> stjm::Result<()> {
    let rv = build_rw2_structure(7)?;
    println!("RW2 structure, T = 7:\n{}", rv.to_dense());

    let graph = AdjacencyGraph::lattice(2, 3)?;
    let ru = build_icar_structure(&graph);
    println!("ICAR structure on a 2x3 lattice:\n{}", ru.to_dense());

    let rd = build_interaction_structure(&rv, &ru);
    println!("interaction structure: {0}x{0}, {1} stored upper entries", rd.dim(), rd.nnz_upper());

    for variant in [Variant::M1, Variant::M2, Variant::M3] {
        let c = build_constraints(7, graph.n_areas(), variant)?;
        println!("{}: {} constraints over {} coordinates", variant.as_str(), c.len(), c.dim());
    }
    Ok(())
}
