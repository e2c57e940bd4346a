//! Wasserstein distances, monotone transport maps, displacement
//! interpolation, slopes, and the HWI chain.

mod flow;
mod hwi;
mod quantile;
mod simplex;
mod slopes;

pub use flow::{velocity_and_flow_check, FlowReport};
pub use hwi::{hwi_check, random_smooth_pair, HwiResult};
pub use quantile::{displacement_interpolation, displacement_interpolation_on, w2_1d, Quantile, TransportPlan1D};
pub use simplex::{solve_transport, w2_discrete, w2_points, CostMatrix, TransportSolution, MAX_SUPPORT};
pub use slopes::{
    analytic_curve_slope, curve_metric_slope, entropy_slope_comparison, entropy_slopes, potential_grid_gradient,
    PerturbedSlope, SlopeReport, DEFAULT_LADDER,
};
