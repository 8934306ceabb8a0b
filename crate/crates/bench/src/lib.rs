//! Fixtures shared by the benchmarks: the reference scenario at a chosen
//! resolution.

use mfflow_core::{catalog, Scenario};

/// `state-invariant-ref` with `n_points` nodes, `n_steps` steps and `n_paths` paths.
pub fn reference(n_points: usize, n_steps: usize, n_paths: usize) -> Scenario {
    let mut spec = catalog("state-invariant-ref").expect("catalog entry");
    spec.grid.n_points = n_points;
    spec.time.n_steps = n_steps;
    spec.mc.n_paths = n_paths;
    spec.check.snapshot_every = n_steps;
    Scenario::build(spec).expect("reference scenario builds")
}
