//! Simulation designs, the Monte Carlo runner, the one-cohort variance
//! oracle and the regression oracle.

pub mod dgp;
pub mod montecarlo;
pub mod twfe;
pub mod variance;

pub use dgp::{simulate_dgp, simulate_with, CovariateDist, DgpConfig, Dispersion, SamplingSign, SimOutput};
pub use montecarlo::{monte_carlo, monte_carlo_draws, summarize, McCell, McDraws, McEstimator, McReport};
pub use twfe::twfe_oracle;
pub use variance::{analytic_variances, AnalyticVariances, SimpleDesign};
