//! Addressable capture and injection of attention maps, plus post-processing.

pub mod hook;
pub mod instruments;
pub mod math;
pub mod policy;
pub mod postprocess;
pub mod site;
pub mod store;

pub use hook::{AttentionHook, NoHook};
pub use instruments::{attach_instruments, Injection, InstrumentSet};
pub use math::compute_attention;
pub use policy::InjectionPolicy;
pub use postprocess::{normalize_map_for_probe, svd_components};
pub use site::{AttentionSite, AttnKind, BlockKind, SiteKey};
pub use store::{AttentionMapRecord, CaptureStore, Retention, StepKey};
