//! Shared fixtures for the benchmarks.

use altsim_core::graph::{make_grid_mesh, make_ring_mesh, MeshSpec};
use altsim_core::physics::{generate_sequence, random_scripts, SimConfig, Trajectory};
use altsim_core::Graph;

/// A simulated sequence of `frames` frames on an `n × n` grid.
pub fn grid_case(n: usize, frames: usize) -> (MeshSpec, Graph, Trajectory) {
    let (mesh, graph) = make_grid_mesh(n, n, 0.02).expect("valid grid");
    let seq = simulate(&mesh, &graph, frames);
    (mesh, graph, seq)
}

/// A simulated sequence on a ring of `nodes` nodes.
pub fn ring_case(nodes: usize, frames: usize) -> (MeshSpec, Graph, Trajectory) {
    let (mesh, graph) = make_ring_mesh(nodes, 0.1).expect("valid ring");
    let seq = simulate(&mesh, &graph, frames);
    (mesh, graph, seq)
}

fn simulate(mesh: &MeshSpec, graph: &Graph, frames: usize) -> Trajectory {
    let cfg = SimConfig::default();
    let script = random_scripts(1, frames as f64 / cfg.fps, 11)[0];
    generate_sequence(&cfg, mesh, graph, &script, frames, 11).expect("stable default config")
}
