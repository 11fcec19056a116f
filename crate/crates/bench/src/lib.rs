//! Fixtures shared by the benchmarks.

use crossid_core::device_filter::FilterConfig;
use crossid_core::pipeline::{prepare, Prepared};
use crossid_core::simulate::{generate, SimConfig, SimDataset};

/// A noisy simulated deployment with `victims` phones and half as many
/// out-of-set visitors.
pub fn scenario(victims: usize, sessions: usize, seed: u64) -> (SimDataset, Prepared) {
    let sim = generate(&SimConfig {
        seed,
        victims,
        oos_subjects: victims / 2,
        sessions,
        ..SimConfig::default()
    })
    .expect("benchmark config is valid");
    let prepared = prepare(&sim.dataset, &sim.oui, &FilterConfig::default()).expect("simulated data is consistent");
    (sim, prepared)
}
