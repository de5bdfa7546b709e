//! Grid geometry, adjacency, covariates and the Kronecker-structured ICAR
//! precision `(D − W) ⊗ Σ⁻¹`.
//!
//! Latent vectors are stacked cell-major: entries `7i .. 7i + 7` hold the
//! parameters of cell `i` in [`PARAM_NAMES`](crate::extremes::PARAM_NAMES)
//! order. Regression coefficients are stacked slot-major: entry `k·q + j`
//! multiplies covariate `j` in parameter slot `k`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extremes::N_PARAMS;

pub type Mat7 = SMatrix<f64, N_PARAMS, N_PARAMS>;

/// Number of columns of the covariate row `(1, lat, lon, elev, sea)`.
pub const N_COVARIATES: usize = 5;
pub const COVARIATE_NAMES: [&str; N_COVARIATES] = ["intercept", "lat", "lon", "elev_m", "seadist_km"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjacency {
    /// Cells sharing an edge.
    #[default]
    Rook,
    /// Cells sharing an edge or a corner.
    Queen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
}

/// Undirected adjacency over grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGraph {
    pub cells: Vec<Cell>,
    neighbors: Vec<Vec<usize>>,
    component: Vec<usize>,
    n_components: usize,
}

impl GridGraph {
    /// Lattice-derived adjacency for centroids on a regular grid.
    pub fn build(cells: Vec<Cell>, resolution: f64, rule: Adjacency) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::Ingestion(format!("grid resolution must be positive, got {resolution}")));
        }
        if cells.is_empty() {
            return Err(Error::Ingestion("no grid cells".into()));
        }
        let lon0 = cells.iter().map(|c| c.lon).fold(f64::INFINITY, f64::min);
        let lat0 = cells.iter().map(|c| c.lat).fold(f64::INFINITY, f64::min);
        let snap = |v: f64, origin: f64, what: &str, id: &str| -> Result<i64> {
            let k = (v - origin) / resolution;
            let r = k.round();
            if (k - r).abs() > 1e-6 {
                return Err(Error::Ingestion(format!(
                    "cell {id}: {what} {v} is not on the {resolution}° lattice"
                )));
            }
            Ok(r as i64)
        };
        let mut index: HashMap<(i64, i64), usize> = HashMap::with_capacity(cells.len());
        let mut ids = BTreeSet::new();
        for (i, c) in cells.iter().enumerate() {
            if !ids.insert(c.id.as_str()) {
                return Err(Error::Ingestion(format!("duplicate cell id {}", c.id)));
            }
            let key = (snap(c.lon, lon0, "longitude", &c.id)?, snap(c.lat, lat0, "latitude", &c.id)?);
            if let Some(j) = index.insert(key, i) {
                return Err(Error::Ingestion(format!(
                    "cells {} and {} share the centroid ({}, {})",
                    cells[j].id, c.id, c.lon, c.lat
                )));
            }
        }
        let offsets: &[(i64, i64)] = match rule {
            Adjacency::Rook => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Adjacency::Queen => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
        };
        let mut keys = vec![(0, 0); cells.len()];
        for (&k, &i) in &index {
            keys[i] = k;
        }
        let neighbors = keys
            .iter()
            .map(|&(x, y)| {
                let mut nb: Vec<usize> = offsets
                    .iter()
                    .filter_map(|&(dx, dy)| index.get(&(x + dx, y + dy)).copied())
                    .collect();
                nb.sort_unstable();
                nb
            })
            .collect();
        Ok(Self::from_neighbors(cells, neighbors))
    }

    /// Adjacency given as an explicit undirected edge list over cell ids.
    pub fn from_edges(cells: Vec<Cell>, edges: &[(String, String)]) -> Result<Self> {
        let mut index = HashMap::with_capacity(cells.len());
        for (i, c) in cells.iter().enumerate() {
            if index.insert(c.id.clone(), i).is_some() {
                return Err(Error::Ingestion(format!("duplicate cell id {}", c.id)));
            }
        }
        let mut sets = vec![BTreeSet::new(); cells.len()];
        for (a, b) in edges {
            let ia = *index.get(a).ok_or_else(|| Error::Ingestion(format!("edge references unknown cell {a}")))?;
            let ib = *index.get(b).ok_or_else(|| Error::Ingestion(format!("edge references unknown cell {b}")))?;
            if ia == ib {
                return Err(Error::Ingestion(format!("self-loop on cell {a}")));
            }
            sets[ia].insert(ib);
            sets[ib].insert(ia);
        }
        let neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Self::from_neighbors(cells, neighbors))
    }

    fn from_neighbors(cells: Vec<Cell>, neighbors: Vec<Vec<usize>>) -> Self {
        let n = cells.len();
        let mut component = vec![usize::MAX; n];
        let mut n_components = 0;
        for start in 0..n {
            if component[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            component[start] = n_components;
            while let Some(i) = stack.pop() {
                for &j in &neighbors[i] {
                    if component[j] == usize::MAX {
                        component[j] = n_components;
                        stack.push(j);
                    }
                }
            }
            n_components += 1;
        }
        for (c, nb) in cells.iter().zip(&neighbors) {
            if nb.is_empty() && n > 1 {
                log::warn!("cell {} has no neighbours; it receives no spatial smoothing", c.id);
            }
        }
        Self { cells, neighbors, component, n_components }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn component(&self, i: usize) -> usize {
        self.component[i]
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.cells.iter().position(|c| c.id == id)
    }

    /// Dense adjacency matrix `W`.
    pub fn adjacency_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut w = DMatrix::zeros(n, n);
        for (i, j) in self.edges() {
            w[(i, j)] = 1.0;
            w[(j, i)] = 1.0;
        }
        w
    }

    /// Dense `D − W`.
    pub fn laplacian_dense(&self) -> DMatrix<f64> {
        let mut l = -self.adjacency_dense();
        for i in 0..self.len() {
            l[(i, i)] = self.degree(i) as f64;
        }
        l
    }

    /// `(D − W) x` for a vector over cells.
    pub fn laplacian_mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let s: f64 = self.neighbors[i].iter().map(|&j| x[j]).sum();
                self.degree(i) as f64 * x[i] - s
            })
            .collect()
    }

    /// Reverse Cuthill–McKee ordering (new position → cell index), used as
    /// the fill-reducing permutation for banded factorizations.
    pub fn rcm_order(&self) -> Vec<usize> {
        let n = self.len();
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut by_degree: Vec<usize> = (0..n).collect();
        by_degree.sort_by_key(|&i| (self.degree(i), i));
        for &start in &by_degree {
            if visited[start] {
                continue;
            }
            visited[start] = true;
            let mut queue = std::collections::VecDeque::from([start]);
            while let Some(i) = queue.pop_front() {
                order.push(i);
                let mut nb: Vec<usize> = self.neighbors[i].iter().copied().filter(|&j| !visited[j]).collect();
                nb.sort_by_key(|&j| (self.degree(j), j));
                for j in nb {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        order.reverse();
        order
    }
}

// ---------------------------------------------------------------------------
// Covariates and design matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CovariateRecord {
    cell_id: String,
    lon: f64,
    lat: f64,
    elev_m: f64,
    seadist_km: f64,
}

/// Per-cell covariate rows `(1, lat, lon, elev, sea)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    pub cell_ids: Vec<String>,
    pub lon: Vec<f64>,
    pub lat: Vec<f64>,
    pub elev_m: Vec<f64>,
    pub seadist_km: Vec<f64>,
    /// Column means/sds applied when z-scored (intercept excluded).
    pub scaling: Option<Vec<(f64, f64)>>,
}

impl CovariateTable {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
        let expected = ["cell_id", "lon", "lat", "elev_m", "seadist_km"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Ingestion(format!(
                "{}: expected header {}, found {}",
                path.display(),
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut t = Self::empty();
        for rec in rdr.deserialize::<CovariateRecord>() {
            let r = rec.map_err(|e| Error::csv(path, e))?;
            for (name, v) in [("lon", r.lon), ("lat", r.lat), ("elev_m", r.elev_m), ("seadist_km", r.seadist_km)] {
                if !v.is_finite() {
                    return Err(Error::Ingestion(format!("{}: cell {} has non-finite {name}", path.display(), r.cell_id)));
                }
            }
            t.cell_ids.push(r.cell_id);
            t.lon.push(r.lon);
            t.lat.push(r.lat);
            t.elev_m.push(r.elev_m);
            t.seadist_km.push(r.seadist_km);
        }
        Ok(t)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for i in 0..self.len() {
            w.serialize(CovariateRecord {
                cell_id: self.cell_ids[i].clone(),
                lon: self.lon[i],
                lat: self.lat[i],
                elev_m: self.elev_m[i],
                seadist_km: self.seadist_km[i],
            })
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn empty() -> Self {
        Self {
            cell_ids: Vec::new(),
            lon: Vec::new(),
            lat: Vec::new(),
            elev_m: Vec::new(),
            seadist_km: Vec::new(),
            scaling: None,
        }
    }

    pub fn len(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_ids.is_empty()
    }

    pub fn cells(&self) -> Vec<Cell> {
        (0..self.len())
            .map(|i| Cell { id: self.cell_ids[i].clone(), lon: self.lon[i], lat: self.lat[i] })
            .collect()
    }

    /// Covariate row of cell `i` in design order.
    pub fn row(&self, i: usize) -> [f64; N_COVARIATES] {
        let raw = [1.0, self.lat[i], self.lon[i], self.elev_m[i], self.seadist_km[i]];
        match &self.scaling {
            None => raw,
            Some(s) => {
                let mut r = raw;
                for j in 1..N_COVARIATES {
                    r[j] = (raw[j] - s[j - 1].0) / s[j - 1].1;
                }
                r
            }
        }
    }

    /// Switch on z-scoring of the non-intercept columns.
    pub fn standardized(mut self) -> Self {
        let cols = [&self.lat, &self.lon, &self.elev_m, &self.seadist_km];
        let n = self.len() as f64;
        let scaling = cols
            .iter()
            .map(|c| {
                let m = c.iter().sum::<f64>() / n;
                let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
                (m, if sd > 0.0 { sd } else { 1.0 })
            })
            .collect();
        self.scaling = Some(scaling);
        self
    }

    /// Reorder rows to follow `graph`'s cell order.
    pub fn aligned_to(&self, graph: &GridGraph) -> Result<Self> {
        if self.len() != graph.len() {
            return Err(Error::Ingestion(format!(
                "covariate table has {} cells but the grid has {}",
                self.len(),
                graph.len()
            )));
        }
        let pos: HashMap<&str, usize> = self.cell_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut out = Self { scaling: self.scaling.clone(), ..Self::empty() };
        for c in &graph.cells {
            let i = *pos
                .get(c.id.as_str())
                .ok_or_else(|| Error::Ingestion(format!("no covariates for cell {}", c.id)))?;
            out.cell_ids.push(self.cell_ids[i].clone());
            out.lon.push(self.lon[i]);
            out.lat.push(self.lat[i]);
            out.elev_m.push(self.elev_m[i]);
            out.seadist_km.push(self.seadist_km[i]);
        }
        Ok(out)
    }
}

pub fn read_adjacency_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["cell_a", "cell_b"] {
        return Err(Error::Ingestion(format!("{}: expected header cell_a,cell_b", path.display())));
    }
    rdr.deserialize::<(String, String)>()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

/// Stacked design `X` with block rows `I₇ ⊗ x̃ᵢᵀ`, stored by its covariate rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: Vec<Vec<f64>>,
    q: usize,
}

impl DesignMatrix {
    pub fn build(graph: &GridGraph, cov: &CovariateTable) -> Result<Self> {
        if cov.len() != graph.len() {
            return Err(Error::Ingestion(format!(
                "covariate table has {} cells but the grid has {}",
                cov.len(),
                graph.len()
            )));
        }
        for (c, id) in graph.cells.iter().zip(&cov.cell_ids) {
            if &c.id != id {
                return Err(Error::Ingestion(format!("covariate row {id} does not match grid cell {}", c.id)));
            }
        }
        Ok(Self::from_rows((0..cov.len()).map(|i| cov.row(i).to_vec()).collect()))
    }

    /// From explicit covariate rows (all of the same length).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let q = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == q), "ragged covariate rows");
        Self { rows, q }
    }

    pub fn n_cells(&self) -> usize {
        self.rows.len()
    }

    /// Covariates per slot, intercept included.
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn shape(&self) -> (usize, usize) {
        (N_PARAMS * self.n_cells(), N_PARAMS * self.q)
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// Structural nonzeros `(row, col, value)` of block row `i`.
    pub fn block_row(&self, i: usize) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(N_PARAMS * self.q);
        for k in 0..N_PARAMS {
            for (j, &x) in self.rows[i].iter().enumerate() {
                out.push((N_PARAMS * i + k, k * self.q + j, x));
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        N_PARAMS * self.q * self.n_cells()
    }

    /// `X γ`.
    pub fn mul(&self, gamma: &[f64]) -> Vec<f64> {
        assert_eq!(gamma.len(), N_PARAMS * self.q);
        let mut out = Vec::with_capacity(N_PARAMS * self.n_cells());
        for row in &self.rows {
            for k in 0..N_PARAMS {
                let g = &gamma[k * self.q..(k + 1) * self.q];
                out.push(row.iter().zip(g).map(|(a, b)| a * b).sum());
            }
        }
        out
    }

    /// `Xᵀ v`.
    pub fn tr_mul(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), N_PARAMS * self.n_cells());
        let mut out = vec![0.0; N_PARAMS * self.q];
        for (i, row) in self.rows.iter().enumerate() {
            for k in 0..N_PARAMS {
                let vk = v[N_PARAMS * i + k];
                for (j, &x) in row.iter().enumerate() {
                    out[k * self.q + j] += x * vk;
                }
            }
        }
        out
    }

    /// `X̃ᵀ (D − W) X̃` (`q × q`).
    pub fn covariate_gram(&self, graph: &GridGraph) -> DMatrix<f64> {
        let n = self.n_cells();
        let q = self.q;
        let mut g = DMatrix::zeros(q, q);
        let mut col = vec![0.0; n];
        for j in 0..q {
            for i in 0..n {
                col[i] = self.rows[i][j];
            }
            let lx = graph.laplacian_mul(&col);
            for jj in 0..q {
                g[(jj, j)] = (0..n).map(|i| self.rows[i][jj] * lx[i]).sum();
            }
        }
        g
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (r, c) = self.shape();
        let mut x = DMatrix::zeros(r, c);
        for i in 0..self.n_cells() {
            for (a, b, v) in self.block_row(i) {
                x[(a, b)] = v;
            }
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Kronecker precision
// ---------------------------------------------------------------------------

/// Implicit `(D − W) ⊗ Σ⁻¹`, never materialized.
#[derive(Debug, Clone)]
pub struct KroneckerPrecision<'g> {
    pub graph: &'g GridGraph,
    pub sigma_inv: Mat7,
}

impl<'g> KroneckerPrecision<'g> {
    pub fn new(graph: &'g GridGraph, sigma_inv: Mat7) -> Self {
        Self { graph, sigma_inv }
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != N_PARAMS * self.graph.len() {
            return Err(Error::Domain(format!(
                "vector of length {} does not match {} cells × {N_PARAMS}",
                v.len(),
                self.graph.len()
            )));
        }
        Ok(())
    }

    /// `[(D − W) ⊗ Σ⁻¹] v = vec(Σ⁻¹ V (D − W))` with `V = vec⁻¹(v)` (7 × N).
    pub fn mul(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        let n = self.graph.len();
        let mut out = vec![0.0; v.len()];
        for i in 0..n {
            // column i of V (D − W)
            let mut col = [0.0; N_PARAMS];
            let d = self.graph.degree(i) as f64;
            for k in 0..N_PARAMS {
                col[k] = d * v[N_PARAMS * i + k];
            }
            for &j in self.graph.neighbors(i) {
                for k in 0..N_PARAMS {
                    col[k] -= v[N_PARAMS * j + k];
                }
            }
            for r in 0..N_PARAMS {
                out[N_PARAMS * i + r] = (0..N_PARAMS).map(|k| self.sigma_inv[(r, k)] * col[k]).sum();
            }
        }
        Ok(out)
    }

    /// `vᵀ [(D − W) ⊗ Σ⁻¹] v = Σ_{i~j} (vᵢ − vⱼ)ᵀ Σ⁻¹ (vᵢ − vⱼ)`.
    pub fn quadform(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        let mut total = 0.0;
        for (i, j) in self.graph.edges() {
            let d: [f64; N_PARAMS] = std::array::from_fn(|k| v[N_PARAMS * i + k] - v[N_PARAMS * j + k]);
            for r in 0..N_PARAMS {
                let mut s = 0.0;
                for k in 0..N_PARAMS {
                    s += self.sigma_inv[(r, k)] * d[k];
                }
                total += d[r] * s;
            }
        }
        Ok(total)
    }

    /// `vec⁻¹(r) (D − W) vec⁻¹(r)ᵀ` (7 × 7), the graph-weighted cross product.
    pub fn residual_scatter(graph: &GridGraph, r: &[f64]) -> Mat7 {
        let mut s = Mat7::zeros();
        for (i, j) in graph.edges() {
            let d = SMatrix::<f64, N_PARAMS, 1>::from_fn(|k, _| r[N_PARAMS * i + k] - r[N_PARAMS * j + k]);
            s += d * d.transpose();
        }
        s
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let l = self.graph.laplacian_dense();
        l.kronecker(&DMatrix::from_iterator(N_PARAMS, N_PARAMS, self.sigma_inv.iter().copied()))
    }
}

/// Stack per-cell 7-vectors into one cell-major vector.
pub fn stack(cells: &[[f64; N_PARAMS]]) -> Vec<f64> {
    cells.iter().flat_map(|c| c.iter().copied()).collect()
}

pub fn unstack(v: &[f64]) -> Vec<[f64; N_PARAMS]> {
    v.chunks_exact(N_PARAMS)
        .map(|c| std::array::from_fn(|k| c[k]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn grid_cells(nx: usize, ny: usize) -> Vec<Cell> {
        let mut cells = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                cells.push(Cell {
                    id: format!("c{y}_{x}"),
                    lon: -100.0 + x as f64,
                    lat: 35.0 + y as f64,
                });
            }
        }
        cells
    }

    fn random_spd(rng: &mut impl Rng) -> Mat7 {
        let a = Mat7::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() + Mat7::identity() * 0.5
    }

    #[test]
    fn single_cell_graph() {
        let g = GridGraph::build(grid_cells(1, 1), 1.0, Adjacency::Rook).unwrap();
        assert_eq!(g.laplacian_dense(), DMatrix::zeros(1, 1));
        assert_eq!(g.degree(0), 0);
    }

    #[test]
    fn pair_graph() {
        let g = GridGraph::build(grid_cells(2, 1), 1.0, Adjacency::Rook).unwrap();
        assert_eq!(g.laplacian_dense(), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn three_by_three_degrees() {
        let g = GridGraph::build(grid_cells(3, 3), 1.0, Adjacency::Rook).unwrap();
        // enumerate shared edges by brute force over centroid pairs
        let cells = &g.cells;
        for i in 0..9 {
            let shared = (0..9)
                .filter(|&j| {
                    let dx = (cells[i].lon - cells[j].lon).abs();
                    let dy = (cells[i].lat - cells[j].lat).abs();
                    (dx + dy - 1.0).abs() < 1e-9
                })
                .count();
            assert_eq!(g.degree(i), shared);
        }
        assert_eq!(g.degree(0), 2);
        assert_eq!(g.degree(1), 3);
        assert_eq!(g.degree(4), 4);
        let q = GridGraph::build(grid_cells(3, 3), 1.0, Adjacency::Queen).unwrap();
        assert_eq!(q.degree(4), 8);
        assert_eq!(q.degree(0), 3);
    }

    #[test]
    fn duplicate_centroids_rejected() {
        let mut cells = grid_cells(2, 1);
        cells[1].lon = cells[0].lon;
        assert!(matches!(GridGraph::build(cells, 1.0, Adjacency::Rook), Err(Error::Ingestion(_))));
    }

    #[test]
    fn components_and_laplacian_null_space() {
        let mut cells = grid_cells(3, 1);
        cells.push(Cell { id: "island".into(), lon: -90.0, lat: 40.0 });
        let g = GridGraph::build(cells, 1.0, Adjacency::Rook).unwrap();
        assert_eq!(g.n_components(), 2);
        let l = g.laplacian_dense();
        assert_eq!(l.clone(), l.transpose());
        let eig = l.symmetric_eigenvalues();
        let zeros = eig.iter().filter(|v| v.abs() < 1e-10).count();
        assert_eq!(zeros, 2);
        assert!(eig.iter().all(|&v| v > -1e-10));
    }

    #[test]
    fn explicit_edges() {
        let cells = grid_cells(3, 1);
        let g = GridGraph::from_edges(cells, &[("c0_0".into(), "c0_2".into())]).unwrap();
        assert_eq!(g.neighbors(0), &[2]);
        assert_eq!(g.degree(1), 0);
        assert!(GridGraph::from_edges(grid_cells(2, 1), &[("c0_0".into(), "zz".into())]).is_err());
    }

    fn table_for(graph: &GridGraph) -> CovariateTable {
        let n = graph.len();
        CovariateTable {
            cell_ids: graph.cells.iter().map(|c| c.id.clone()).collect(),
            lon: graph.cells.iter().map(|c| c.lon).collect(),
            lat: graph.cells.iter().map(|c| c.lat).collect(),
            elev_m: (0..n).map(|i| 100.0 + 13.0 * i as f64).collect(),
            seadist_km: (0..n).map(|i| 50.0 + 7.0 * (i * i) as f64).collect(),
            scaling: None,
        }
    }

    #[test]
    fn design_shapes() {
        let g = GridGraph::build(grid_cells(1, 1), 1.0, Adjacency::Rook).unwrap();
        let x = DesignMatrix::build(&g, &table_for(&g)).unwrap();
        assert_eq!(x.shape(), (7, 35));
        let d = x.to_dense();
        let row = table_for(&g).row(0);
        for k in 0..7 {
            for j in 0..5 {
                assert_eq!(d[(k, k * 5 + j)], row[j]);
            }
        }
        assert_eq!(x.nnz(), 35);

        let g = GridGraph::build(grid_cells(25, 10), 1.0, Adjacency::Rook).unwrap();
        let x = DesignMatrix::build(&g, &table_for(&g)).unwrap();
        assert_eq!(x.shape(), (1750, 35));
    }

    #[test]
    fn design_unit_vectors_pick_covariates() {
        let g = GridGraph::build(grid_cells(2, 2), 1.0, Adjacency::Rook).unwrap();
        let cov = table_for(&g);
        let x = DesignMatrix::build(&g, &cov).unwrap();
        let dense = x.to_dense();
        for k in 0..35 {
            let mut e = vec![0.0; 35];
            e[k] = 1.0;
            let fast = x.mul(&e);
            let slow = &dense * DVector::from_column_slice(&e);
            let (slot, col) = (k / 5, k % 5);
            for i in 0..4 {
                for s in 0..7 {
                    let expect = if s == slot { cov.row(i)[col] } else { 0.0 };
                    assert_eq!(fast[7 * i + s], expect);
                    assert_eq!(slow[7 * i + s], expect);
                }
            }
        }
        let v: Vec<f64> = (0..28).map(|i| (i as f64).sin()).collect();
        let tr = dense.transpose() * DVector::from_column_slice(&v);
        for (a, b) in x.tr_mul(&v).iter().zip(tr.iter()) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn misaligned_design_rejected() {
        let g = GridGraph::build(grid_cells(2, 1), 1.0, Adjacency::Rook).unwrap();
        let mut cov = table_for(&g);
        cov.cell_ids.swap(0, 1);
        assert!(DesignMatrix::build(&g, &cov).is_err());
        let aligned = cov.aligned_to(&g).unwrap();
        assert!(DesignMatrix::build(&g, &aligned).is_ok());
    }

    #[test]
    fn kron_quadform_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = GridGraph::build(grid_cells(3, 3), 1.0, Adjacency::Rook).unwrap();
        let s = random_spd(&mut rng);
        let p = KroneckerPrecision::new(&g, s.try_inverse().unwrap());
        let base: [f64; 7] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        assert!(p.quadform(&stack(&vec![base; 9])).unwrap().abs() < 1e-10);

        let g2 = GridGraph::build(grid_cells(2, 1), 1.0, Adjacency::Rook).unwrap();
        let p2 = KroneckerPrecision::new(&g2, Mat7::identity());
        let v: Vec<f64> = (0..14).map(|_| rng.random_range(-2.0..2.0)).collect();
        let expected: f64 = (0..7).map(|k| (v[k] - v[7 + k]).powi(2)).sum();
        assert!((p2.quadform(&v).unwrap() - expected).abs() < 1e-12);

        let dense = p.to_dense();
        for _ in 0..20 {
            let v: Vec<f64> = (0..63).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dv = DVector::from_column_slice(&v);
            let oracle = (dv.transpose() * &dense * &dv)[(0, 0)];
            let fast = p.quadform(&v).unwrap();
            assert!((fast - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
            let mv = p.mul(&v).unwrap();
            let dmv = &dense * &dv;
            for (a, b) in mv.iter().zip(dmv.iter()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
        assert!(p.quadform(&[0.0; 5]).is_err());
    }

    #[test]
    fn residual_scatter_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = GridGraph::build(grid_cells(3, 2), 1.0, Adjacency::Rook).unwrap();
        let r: Vec<f64> = (0..42).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rm = DMatrix::from_column_slice(7, 6, &r);
        let dense = &rm * g.laplacian_dense() * rm.transpose();
        let fast = KroneckerPrecision::residual_scatter(&g, &r);
        for i in 0..7 {
            for j in 0..7 {
                assert!((fast[(i, j)] - dense[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rcm_is_a_permutation() {
        let g = GridGraph::build(grid_cells(6, 6), 1.0, Adjacency::Rook).unwrap();
        let mut o = g.rcm_order();
        o.sort_unstable();
        assert_eq!(o, (0..36).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn kron_quadform_psd(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GridGraph::build(grid_cells(3, 2), 1.0, Adjacency::Rook).unwrap();
            let p = KroneckerPrecision::new(&g, random_spd(&mut rng).try_inverse().unwrap());
            let v: Vec<f64> = (0..42).map(|_| rng.random_range(-5.0..5.0)).collect();
            prop_assert!(p.quadform(&v).unwrap() >= -1e-12);
        }

        #[test]
        fn quadform_invariant_under_consistent_permutation(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cells = grid_cells(3, 3);
            let g = GridGraph::build(cells.clone(), 1.0, Adjacency::Rook).unwrap();
            let mut perm: Vec<usize> = (0..9).collect();
            for i in (1..9).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pcells: Vec<Cell> = perm.iter().map(|&i| cells[i].clone()).collect();
            let pg = GridGraph::build(pcells, 1.0, Adjacency::Rook).unwrap();
            let sinv = random_spd(&mut rng).try_inverse().unwrap();
            let v: Vec<[f64; 7]> = (0..9).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
            let pv: Vec<[f64; 7]> = perm.iter().map(|&i| v[i]).collect();
            let a = KroneckerPrecision::new(&g, sinv).quadform(&stack(&v)).unwrap();
            let b = KroneckerPrecision::new(&pg, sinv).quadform(&stack(&pv)).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));

            let cov = table_for(&g);
            let pcov = cov.aligned_to(&pg).unwrap();
            let x = DesignMatrix::build(&g, &cov).unwrap();
            let px = DesignMatrix::build(&pg, &pcov).unwrap();
            let gamma: Vec<f64> = (0..35).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r: Vec<f64> = stack(&v).iter().zip(x.mul(&gamma)).map(|(a, b)| a - b).collect();
            let pr: Vec<f64> = stack(&pv).iter().zip(px.mul(&gamma)).map(|(a, b)| a - b).collect();
            let qa = KroneckerPrecision::new(&g, sinv).quadform(&r).unwrap();
            let qb = KroneckerPrecision::new(&pg, sinv).quadform(&pr).unwrap();
            prop_assert!((qa - qb).abs() <= 1e-9 * qa.abs().max(1.0));
        }
    }
}
