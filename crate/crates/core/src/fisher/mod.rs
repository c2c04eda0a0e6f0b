//! Fisher-information scoring of θ̃ and the sparse masks derived from it.

mod estimate;
pub mod io;
mod mask;

pub use estimate::{canonical_subset, empirical_fisher, estimate_fisher, log_likelihood_grad, FisherEstimate};
pub use mask::{budget_to_k, k_for_ratio, mask_gradients, select, SparsityMask, Strategy};

/// Default number of Fisher samples.
pub const DEFAULT_FISHER_SAMPLES: usize = 128;
