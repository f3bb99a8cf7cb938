//! Fixtures shared by the benchmarks.

use cmpc_core::canal_model::CanalModel;
use cmpc_core::coalition_ctrl::{ControllerConfig, Setpoint};
use cmpc_core::numerics::Vector;
use cmpc_core::supervisor::{synthesize_coalition, CoalitionGain};

/// The 13-reach canal at the default sample time.
pub fn canal() -> CanalModel {
    CanalModel::dez(ControllerConfig::default().sample_time)
}

/// Centralized gain and a disturbed state relative to the setpoint at
/// uniform 2 m³/s offtakes.
pub fn centralized_problem(canal: &CanalModel) -> (CoalitionGain, Setpoint, Vector) {
    let cfg = ControllerConfig::default();
    let g = canal.global();
    let gain = synthesize_coalition(canal, &g.members, cfg.level_weight, cfg.input_weight).expect("synthesis");
    let offtakes = vec![2.0; canal.len()];
    let setpoint = Setpoint {
        state: canal.steady_state(&offtakes),
        input: Vector::zeros(canal.len()),
        slack: Vector::zeros(g.n()),
        feasible: true,
    };
    let mut zeta = Vector::zeros(g.n());
    for r in g.level_rows() {
        zeta[r] = 0.3;
    }
    (gain, setpoint, zeta)
}
