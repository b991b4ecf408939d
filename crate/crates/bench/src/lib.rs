//! Shared inputs for the benchmarks.

use asa_core::phantom::{gen_phantom, PhantomSpec};
use asa_core::Volume;

/// Default 32³ labelled phantom.
pub fn phantom(seed: u64) -> Volume {
    gen_phantom(&PhantomSpec::default().with_seed(seed)).expect("default phantom spec is valid")
}
