//! Training-free search over block substitutions.

pub mod ehvi;
pub mod encoding;
pub mod gp;
pub mod mobo;
pub mod objective;
pub mod pareto;
pub mod select;

pub use ehvi::ehvi;
pub use encoding::{decode, encode, latin_hypercube, nth_config, space_size};
pub use gp::{GpGrid, GpModel};
pub use mobo::{brute_force_pareto, mobo_run, propose, reference_point, write_run_log, MoboResult, MoboSettings};
pub use objective::{penalty_scale, Objective, StitchedObjective, TableObjective, BRUTE_FORCE_LIMIT};
pub use pareto::{dominates, hypervolume_2d, pareto_update, Observation, ParetoArchive};
pub use select::{knee_select, least_latency_select};
