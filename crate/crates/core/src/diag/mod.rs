//! Analysis artifacts: accumulated RMSE curves, parameter sweeps and ratio tables.

mod rmse;
mod sweep;

pub use rmse::{accumulated_rmse, rmse_curve, RmseCurve, RmseRow};
pub use sweep::{run_sweep, sweep_values, write_sweep_csv, SweepAxis, SweepRow};
