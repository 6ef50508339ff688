//! Shared fixtures for the benchmarks.

use pwrecon_core::Config;

/// Default geometry on a reduced `n x n` grid centred in the default field of view.
pub fn config(n: usize) -> Config {
    let mut c = Config::default();
    let half = 0.1e-3 * n as f64;
    c.grid.x = [-half, half];
    c.grid.z = [28e-3 - half, 28e-3 + half];
    c.grid.n_x = n;
    c.grid.n_z = n;
    c
}
