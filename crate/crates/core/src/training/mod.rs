//! Manual reverse-mode training: backward pass, Adam, finite-difference
//! verification and a supervised regression driver.

pub mod adam;
pub mod backward;
pub mod gradcheck;
pub mod supervised;

pub use adam::{Adam, AdamConfig, NamedGradients, Parameterized};
pub use backward::{backward, block_backward, BlockGradients, GradientSet};
pub use gradcheck::{
    check_gradients, gradient_suite, mse_loss, random_suite_network, CellReport, GradCheckConfig, GradCheckEntry,
    GradCheckReport, SuiteCell, SuiteReport,
};
pub use supervised::{
    evaluate_mse, fit_supervised, write_jsonl, Checkpoint, Dataset, GrowthOutcome, NfnModel, StepMetrics,
    SupervisedConfig, TrainingReport,
};
