//! Constant graph topology, the symmetric-normalized propagation operator
//! `D̂^{-1/2} Â D̂^{-1/2}` with `Â = A + I`, graph convolution, and the
//! synthetic meshes used for data generation.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs stored in row `i`, in increasing column order.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// Stored value at `(i, j)`, zero when absent.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&j) {
            Ok(p) => self.values[span.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_rows, self.n_cols]);
        let n = self.n_cols;
        for i in 0..self.n_rows {
            for (j, v) in self.row(i) {
                t.data_mut()[i * n + j] = v;
            }
        }
        t
    }

    /// Exact structural and numeric symmetry.
    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols
            && (0..self.n_rows).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    /// `self · x` for a dense `x` with `n_cols` rows.
    pub fn mul_dense(&self, x: &Tensor) -> Result<Tensor> {
        let (r, k) = x.dims2()?;
        if r != self.n_cols {
            return Err(Error::shape(
                "propagate",
                &[self.n_rows, self.n_cols],
                x.shape(),
            ));
        }
        let xd = x.data();
        let mut out = vec![0.0; self.n_rows * k];
        for (i, dst) in out.chunks_mut(k).enumerate() {
            for (j, v) in self.row(i) {
                for (d, s) in dst.iter_mut().zip(&xd[j * k..(j + 1) * k]) {
                    *d += v * s;
                }
            }
        }
        Tensor::new(vec![self.n_rows, k], out)
    }

    /// `selfᵀ · g` where `g` is a row-major `n_rows × k` buffer.
    pub(crate) fn mul_transpose_slice(&self, g: &[f64], k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols * k];
        for i in 0..self.n_rows {
            let src = &g[i * k..(i + 1) * k];
            for (j, v) in self.row(i) {
                for (d, s) in out[j * k..(j + 1) * k].iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }
}

/// Fixed topology plus its normalized propagation matrix.
#[derive(Debug, Clone)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<[usize; 2]>,
    propagation: Arc<SparseMatrix>,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Undirected edges, each stored as `[min, max]` in input order.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn propagation(&self) -> &Arc<SparseMatrix> {
        &self.propagation
    }

    /// One-ring neighbourhood of `v` (excluding `v`).
    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        self.propagation
            .row(v)
            .map(|(j, _)| j)
            .filter(|&j| j != v)
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return false;
        }
        let mut seen = vec![false; self.num_nodes];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for u in self.neighbors(v) {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// `P · x · theta` on plain tensors.
    pub fn conv(&self, x: &Tensor, theta: &Tensor) -> Result<Tensor> {
        self.check_conv_shapes(x.shape(), theta.shape())?;
        self.propagation.mul_dense(x)?.matmul(theta)
    }

    fn check_conv_shapes(&self, x: &[usize], theta: &[usize]) -> Result<()> {
        if x.len() != 2 || x[0] != self.num_nodes {
            return Err(Error::shape("graph_conv", x, &[self.num_nodes]));
        }
        if theta.len() != 2 || theta[0] != x[1] {
            return Err(Error::shape("graph_conv", x, theta));
        }
        Ok(())
    }
}

/// Builds a [`Graph`] from `num_nodes` and undirected `edges`.
///
/// Entry `(i, j)` of the propagation matrix is `1/sqrt(d_i d_j)` for every
/// `j` in the closed one-ring of `i`, with `d_i = 1 + deg(i)`. Computing the
/// product `d_i * d_j` before the root makes the matrix exactly symmetric.
pub fn build_propagation(num_nodes: usize, edges: &[[usize; 2]]) -> Result<Graph> {
    if num_nodes == 0 {
        return Err(Error::contract("graph needs at least one node"));
    }
    let mut seen = BTreeSet::new();
    let mut normalized = Vec::with_capacity(edges.len());
    let mut adjacency: Vec<Vec<usize>> = (0..num_nodes).map(|i| vec![i]).collect();
    for &[a, b] in edges {
        for idx in [a, b] {
            if idx >= num_nodes {
                return Err(Error::Index {
                    index: idx,
                    bound: num_nodes,
                });
            }
        }
        if a == b {
            return Err(Error::contract(format!(
                "explicit self-loop on node {a}; self-loops are implied"
            )));
        }
        let e = [a.min(b), a.max(b)];
        if !seen.insert(e) {
            return Err(Error::contract(format!(
                "duplicate edge ({}, {})",
                e[0], e[1]
            )));
        }
        normalized.push(e);
        adjacency[a].push(b);
        adjacency[b].push(a);
    }

    let degree: Vec<f64> = adjacency.iter().map(|n| n.len() as f64).collect();
    let mut row_ptr = Vec::with_capacity(num_nodes + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for (i, nbrs) in adjacency.iter_mut().enumerate() {
        nbrs.sort_unstable();
        for &j in nbrs.iter() {
            col_idx.push(j);
            values.push(1.0 / (degree[i] * degree[j]).sqrt());
        }
        row_ptr.push(col_idx.len());
    }

    Ok(Graph {
        num_nodes,
        edges: normalized,
        propagation: Arc::new(SparseMatrix {
            n_rows: num_nodes,
            n_cols: num_nodes,
            row_ptr,
            col_idx,
            values,
        }),
    })
}

/// Records `P · x · theta` on the tape.
pub fn graph_conv(tape: &mut Tape, g: &Graph, x: Var, theta: Var) -> Result<Var> {
    g.check_conv_shapes(tape.value(x).shape(), tape.value(theta).shape())?;
    let px = tape.propagate(g.propagation(), x)?;
    tape.matmul(px, theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshKind {
    Grid,
    Ring,
    Loaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub kind: MeshKind,
    pub dims: Vec<usize>,
    /// Rest coordinates in meters, one row per node.
    pub rest_positions: Vec<[f64; 3]>,
}

impl MeshSpec {
    pub fn num_nodes(&self) -> usize {
        self.rest_positions.len()
    }

    /// Rest positions as a `|V|×3` tensor.
    pub fn rest_tensor(&self) -> Tensor {
        let data = self.rest_positions.iter().flatten().copied().collect();
        Tensor::new(vec![self.num_nodes(), 3], data).expect("non-empty mesh")
    }

    pub fn rest_length(&self, [a, b]: [usize; 2]) -> f64 {
        let (p, q) = (self.rest_positions[a], self.rest_positions[b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }

    /// Checks the mesh against its graph: matching node count, positive rest
    /// lengths and a connected topology.
    pub fn validate(&self, graph: &Graph) -> Result<()> {
        if self.num_nodes() != graph.num_nodes() {
            return Err(Error::contract(format!(
                "mesh has {} positions but graph has {} nodes",
                self.num_nodes(),
                graph.num_nodes()
            )));
        }
        if let Some(e) = graph.edges().iter().find(|&&e| self.rest_length(e) <= 0.0) {
            return Err(Error::contract(format!(
                "edge ({}, {}) has zero rest length",
                e[0], e[1]
            )));
        }
        if !graph.is_connected() {
            return Err(Error::contract("mesh graph is not connected"));
        }
        Ok(())
    }
}

/// Planar `nx × ny` grid in the z = 0 plane with axis edges and both
/// diagonals of every quad.
pub fn make_grid_mesh(nx: usize, ny: usize, spacing: f64) -> Result<(MeshSpec, Graph)> {
    if nx < 2 || ny < 2 {
        return Err(Error::contract(format!(
            "grid needs nx, ny >= 2, got {nx}x{ny}"
        )));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::contract(format!("grid spacing must be > 0, got {spacing}")));
    }
    let id = |i: usize, j: usize| j * nx + i;
    let mut rest_positions = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            rest_positions.push([i as f64 * spacing, j as f64 * spacing, 0.0]);
        }
    }
    let mut edges = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if i + 1 < nx {
                edges.push([id(i, j), id(i + 1, j)]);
            }
            if j + 1 < ny {
                edges.push([id(i, j), id(i, j + 1)]);
            }
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            edges.push([id(i, j), id(i + 1, j + 1)]);
            edges.push([id(i + 1, j), id(i, j + 1)]);
        }
    }
    let graph = build_propagation(nx * ny, &edges)?;
    let mesh = MeshSpec {
        kind: MeshKind::Grid,
        dims: vec![nx, ny],
        rest_positions,
    };
    Ok((mesh, graph))
}

/// Closed loop of `n` nodes on a circle of the given radius.
pub fn make_ring_mesh(n: usize, radius: f64) -> Result<(MeshSpec, Graph)> {
    if n < 3 {
        return Err(Error::contract(format!("ring needs at least 3 nodes, got {n}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::contract(format!("ring radius must be > 0, got {radius}")));
    }
    let rest_positions = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            [radius * a.cos(), radius * a.sin(), 0.0]
        })
        .collect();
    let edges: Vec<[usize; 2]> = (0..n).map(|i| [i, (i + 1) % n]).collect();
    let graph = build_propagation(n, &edges)?;
    Ok((
        MeshSpec {
            kind: MeshKind::Ring,
            dims: vec![n],
            rest_positions,
        },
        graph,
    ))
}

pub const GRAPH_FILE_VERSION: u32 = 1;

/// On-disk mesh description (JSON). Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub version: u32,
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub rest_positions: Vec<[f64; 3]>,
}

impl GraphFile {
    pub fn from_mesh(mesh: &MeshSpec, graph: &Graph) -> Self {
        Self {
            version: GRAPH_FILE_VERSION,
            num_nodes: graph.num_nodes(),
            edges: graph.edges().to_vec(),
            rest_positions: mesh.rest_positions.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: GraphFile = serde_json::from_str(&text)?;
        if file.version != GRAPH_FILE_VERSION {
            return Err(Error::Format(format!(
                "unsupported graph file version {}",
                file.version
            )));
        }
        Ok(file)
    }

    /// Rebuilds the mesh and graph, validating both.
    pub fn into_mesh(self) -> Result<(MeshSpec, Graph)> {
        if self.rest_positions.len() != self.num_nodes {
            return Err(Error::Format(format!(
                "{} rest positions for {} nodes",
                self.rest_positions.len(),
                self.num_nodes
            )));
        }
        let graph = build_propagation(self.num_nodes, &self.edges)?;
        let mesh = MeshSpec {
            kind: MeshKind::Loaded,
            dims: vec![self.num_nodes],
            rest_positions: self.rest_positions,
        };
        mesh.validate(&graph)?;
        Ok((mesh, graph))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Graph {
        build_propagation(3, &[[0, 1], [1, 2]]).unwrap()
    }

    #[test]
    fn single_node_is_identity() {
        let g = build_propagation(1, &[]).unwrap();
        assert_eq!(g.propagation().to_dense().data(), &[1.0]);
    }

    #[test]
    fn path_graph_values() {
        let p = path3().propagation().to_dense();
        assert_eq!(p.get2(0, 0), 0.5);
        assert_eq!(p.get2(1, 1), 1.0 / 3.0);
        assert_eq!(p.get2(2, 2), 0.5);
        assert!((p.get2(0, 1) - 0.408_248_290_463_863).abs() < 1e-12);
        assert_eq!(p.get2(0, 2), 0.0);
    }

    #[test]
    fn invalid_edges() {
        assert!(matches!(
            build_propagation(2, &[[0, 2]]),
            Err(Error::Index { index: 2, bound: 2 })
        ));
        assert!(build_propagation(2, &[[0, 1], [1, 0]]).is_err());
        assert!(build_propagation(2, &[[1, 1]]).is_err());
        // isolated node keeps its self-loop
        let g = build_propagation(3, &[[0, 1]]).unwrap();
        assert_eq!(g.propagation().get(2, 2), 1.0);
    }

    #[test]
    fn conv_edge_cases() {
        let g = build_propagation(4, &[]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(g.conv(&x, &Tensor::identity(2)).unwrap(), x);
        let zero = g.conv(&x, &Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(zero, Tensor::zeros(&[4, 3]));

        let p = path3();
        let onehot = Tensor::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]);
        let out = p.conv(&onehot, &Tensor::identity(1)).unwrap();
        assert_eq!(out.data()[0], 0.5);
        assert!((out.data()[1] - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert_eq!(out.data()[2], 0.0);

        assert!(p.conv(&Tensor::zeros(&[2, 1]), &Tensor::identity(1)).is_err());
        assert!(p.conv(&onehot, &Tensor::identity(2)).is_err());
    }

    #[test]
    fn grid_counts() {
        let (m, g) = make_grid_mesh(2, 2, 1.0).unwrap();
        assert_eq!((m.num_nodes(), g.edges().len()), (4, 6));
        let (m, g) = make_grid_mesh(3, 2, 1.0).unwrap();
        assert_eq!((m.num_nodes(), g.edges().len()), (6, 11));
        let s = 0.25;
        let (m, g) = make_grid_mesh(4, 5, s).unwrap();
        for &e in g.edges() {
            let l = m.rest_length(e);
            assert!((l - s).abs() < 1e-15 || (l - s * 2f64.sqrt()).abs() < 1e-15);
        }
        m.validate(&g).unwrap();
        assert!(make_grid_mesh(1, 4, 1.0).is_err());
        assert!(make_grid_mesh(3, 3, 0.0).is_err());
    }

    #[test]
    fn ring_is_connected_cycle() {
        let (m, g) = make_ring_mesh(6, 0.1).unwrap();
        m.validate(&g).unwrap();
        assert!(g.neighbors(0).contains(&5));
        assert!(make_ring_mesh(2, 1.0).is_err());
    }

    #[test]
    fn graph_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        let (m, g) = make_grid_mesh(3, 3, 0.1).unwrap();
        let file = GraphFile::from_mesh(&m, &g);
        file.save(&path).unwrap();
        let back = GraphFile::load(&path).unwrap();
        assert_eq!(back, file);
        let (m2, g2) = back.into_mesh().unwrap();
        assert_eq!(m2.rest_positions, m.rest_positions);
        assert_eq!(g2.propagation().as_ref(), g.propagation().as_ref());
    }

    #[test]
    fn graph_file_rejects_unknown_fields_and_disconnected() {
        let bad = r#"{"version":1,"num_nodes":1,"edges":[],"rest_positions":[[0,0,0]],"extra":1}"#;
        assert!(serde_json::from_str::<GraphFile>(bad).is_err());
        let split = GraphFile {
            version: 1,
            num_nodes: 2,
            edges: vec![],
            rest_positions: vec![[0.0; 3], [1.0, 0.0, 0.0]],
        };
        assert!(split.into_mesh().is_err());
    }
}
