//! Alignment metrics and the forgetting protocols built on them.

mod metrics;
mod probe;
mod protocols;

pub use metrics::{energy_distance, energy_permutation_test, iad, image_alignment, PermutationTest};
pub use probe::{text_alignment, ProbeClassifier, ProbeConfig};
pub use protocols::{run_pcf_protocol, run_rcf_protocol, AlignmentRecord, PcfReport, RcfReport};
