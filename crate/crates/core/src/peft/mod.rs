//! Parameter-efficient adapters and the flat θ̃ vector they expose.
//!
//! Every method stores its trainable scalars in one flat vector, split into
//! segments ordered by layer depth, then site name, then role (`B`, `A`, `m`, …).
//! Masks, Fisher scores and optimizer moments are all indexed by that vector.

mod config;
mod module;
mod pissa;

pub use config::{projection_shape, Init, Method, PeftConfig, Submodule, TargetWeight, POSITION_BUDGET};
pub use module::{
    attach, attach_adapter, attach_dora, attach_ia3, attach_lora, attach_prefix, attach_unipelt, layout,
    prefix_site, theta_tilde, PeftModule, Role, Segment, SegmentRef, ThetaTilde, SITE_ADAPTER_ATTN,
    SITE_ADAPTER_FFN, SITE_IA3_FFN, SITE_IA3_KEY, SITE_IA3_VALUE,
};
pub use pissa::pissa_init;
