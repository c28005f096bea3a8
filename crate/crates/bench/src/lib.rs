//! Benchmark fixtures shared by the criterion targets.

use taskcomm::{Dims, SweepInstance};

/// The sweep instance every benchmark runs on, at the default problem size.
pub fn standard_instance(energy: f64) -> SweepInstance {
    let mut inst =
        SweepInstance::generate(Dims::STANDARD, Some(8), 7).expect("default dimensions are valid");
    inst.channels.energy = energy;
    inst
}
