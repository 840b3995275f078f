//! Shared fixtures for the criterion benchmarks.

use siri_core::workload::{gen_dataset, WorkloadSpec};
use siri_core::{Entry, Result};

/// Deterministic dataset of `n` records with default key and value shapes.
pub fn dataset(n: usize, seed: u64) -> Result<Vec<Entry>> {
    gen_dataset(&WorkloadSpec {
        n_records: n,
        seed,
        ..WorkloadSpec::default()
    })
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(super::dataset(100, 1).unwrap(), super::dataset(100, 1).unwrap());
    }
}
