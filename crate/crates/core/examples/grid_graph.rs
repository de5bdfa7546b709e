//! Grid adjacency, the stacked design matrix and the Kronecker-structured
//! ICAR precision.
//!
//! ```bash
//! cargo run --example grid_graph
//! ```

use extattr::lattice::{Adjacency, Cell, CovariateTable, DesignMatrix, GridGraph, KroneckerPrecision, Mat7};

fn main() -> extattr::Result<()> {
    let cells: Vec<Cell> = (0..12)
        .map(|i| Cell { id: format!("g{i:02}"), lon: -100.0 + (i % 4) as f64, lat: 40.0 + (i / 4) as f64 })
        .collect();
    for rule in [Adjacency::Rook, Adjacency::Queen] {
        let g = GridGraph::build(cells.clone(), 1.0, rule)?;
        let degrees: Vec<usize> = (0..g.len()).map(|i| g.degree(i)).collect();
        println!("{rule:?}: {} edges, degrees {degrees:?}", g.n_edges());
    }

    let graph = GridGraph::build(cells.clone(), 1.0, Adjacency::Rook)?;
    let cov = CovariateTable {
        cell_ids: cells.iter().map(|c| c.id.clone()).collect(),
        lon: cells.iter().map(|c| c.lon).collect(),
        lat: cells.iter().map(|c| c.lat).collect(),
        elev_m: (0..12).map(|i| 300.0 + 25.0 * i as f64).collect(),
        seadist_km: (0..12).map(|i| 800.0 - 30.0 * i as f64).collect(),
        scaling: None,
    }
    .standardized();
    let x = DesignMatrix::build(&graph, &cov)?;
    println!("\ndesign: {:?} with {} nonzeros", x.shape(), x.nnz());

    // a field equal to X gamma has zero ICAR energy only when it is constant
    let q = KroneckerPrecision::new(&graph, Mat7::identity());
    let constant = vec![1.0; 7 * graph.len()];
    let mut gamma = vec![0.0; 7 * x.q()];
    gamma[2] = 1.0;
    println!("quadratic form of a constant field: {:.3e}", q.quadform(&constant)?);
    println!("quadratic form of a longitude trend: {:.3}", q.quadform(&x.mul(&gamma))?);
    println!("fill-reducing order: {:?}", graph.rcm_order());
    Ok(())
}
