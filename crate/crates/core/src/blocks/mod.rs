//! Composite blocks of the classifier and their parameter accounting.

mod cbam;
mod errc;
mod inverted_residual;
mod params;
mod stem;

pub use cbam::{CbamBlock, CBAM_REDUCTION, CBAM_SPATIAL_KERNEL};
pub use errc::ErrcBlock;
pub use inverted_residual::{InvertedResidualBlock, EXPANSION};
pub use params::{count_actual_params, ParamFormula, ParamTable};
pub use stem::ConvBnAct;
