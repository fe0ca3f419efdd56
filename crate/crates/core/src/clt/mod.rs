//! Central-limit experiments: convolution powers, transport distances,
//! entropy and Fisher information, kernel propagation and bound records.

mod convolve;
mod experiment;
mod info;
mod propagate;
mod record;
mod transport;

pub use propagate::{partial_sums, propagate_kernel, NeighborRegression, MIN_PAIRS};
pub use record::{sort_records, write_csv, write_json_lines, write_markdown, ExperimentRecord, RecordKind, ABS_SLACK, CSV_HEADER};
pub use convolve::{convolve_iid_1d, gaussian_smooth, DRIFT_TOL, MAX_CONVOLUTION_POWER};
pub use transport::{w2_empirical_nd, w2_quantile_1d, w2_to_gaussian, MAX_ASSIGNMENT};
pub use info::{entropy_fisher, EntropyFisher, DENSITY_FLOOR, FISHER_CONSISTENCY};
pub use experiment::{
    bound_formula, clt_experiment, poincare_constant, propagation_check, smoothed_fisher_check, Check, CltConfig, EMPIRICAL_TOL,
    PROPAGATION_RESIDUAL, PROPAGATION_TOL, RIO_TOL,
};
