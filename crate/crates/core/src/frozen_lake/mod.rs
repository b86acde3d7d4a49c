//! Deterministic Frozen Lake: map parsing, a value-iteration oracle, the
//! optimal and detour trajectories, and grid policies trained under each
//! loss and scored by MSE to the oracle's transition table.

mod grid;
mod oracle;
mod train;

pub use grid::{load_map, parse_grid, parse_path, shipped_map, Action, CellKind, GridSpec, SHIPPED_MAP, SHIPPED_PATH};
pub use oracle::{
    make_trajectories, value_iteration, OraclePolicy, RewardSpec, Terminal, Trajectory, CONVERGENCE_TOLERANCE,
    DEFAULT_DISCOUNT, DEFAULT_TRUNCATION,
};
pub use train::{
    exploration_coverage, median, policy_mse, policy_table, run_grid_experiment, runs_to_csv, train_grid_policy,
    trajectory_demo, GridEstimator, GridMethod, GridPolicy, GridRun, GridTrainConfig, OrderingVerdict, CSV_HEADER,
    DPO_SLACK,
};
