pub mod fpe;
pub mod job;
pub mod null_text;
pub mod sweep;

pub use fpe::{fpe_generated, fpe_null_text, fpe_real, run_edit, BranchCond, EditOutcome, PairedOutput, PairedRun};
pub use job::{CaptureRequest, EditJob, EditSource, RealMethod, RealOptions};
pub use null_text::{optimize_null_text, NullTextOptConfig, NullTextState};
pub use sweep::{ablation_sweep, SweepCell, SweepGrid, SweepManifest, SweepMode, SweepOptions};
