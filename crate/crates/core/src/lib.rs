//! Coalitional model predictive control of an irrigation canal with
//! supervisory switching of the communication topology.

// Negated float comparisons below deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod canal_model;
pub mod cli_io;
pub mod coalition_ctrl;
pub mod error;
pub mod numerics;
pub mod simulator;
pub mod supervisor;
pub mod topology;

pub use error::{Error, Result};

pub use canal_model::{CanalModel, CoalitionModel, ReachParams};
pub use cli_io::{load_config, read_trace, write_trace, RunConfig};
pub use coalition_ctrl::{ControllerConfig, KalmanNoise, MpcStatus};
pub use numerics::{Matrix, Vector};
pub use simulator::{
    accumulate_costs, run_centralized, run_closed_loop, CostReport, PlantConfig, Scenario, SimConfig, SimRun, SimTrace,
};
pub use supervisor::{select_topology, GainSet, SynthesisCache};
pub use topology::{partition_of, Partition, Topology};
