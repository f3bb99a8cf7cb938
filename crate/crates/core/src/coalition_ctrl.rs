//! Bottom layer: per-coalition estimation, setpoint computation and
//! constrained MPC.
//!
//! Each coalition runs a Kalman filter on its stacked model augmented with a
//! constant disturbance `ω` per boundary channel, computes the steady state
//! that cancels measured offtakes and the estimated boundary outflow, moves it
//! to the nearest feasible setpoint, and rectifies the LQ law `K ζ + υˢ` with
//! an MPC correction `υ′` that enforces the increment box exactly and the
//! positive-flow constraint softly.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::canal_model::CoalitionModel;
use crate::error::{Error, Result};
use crate::numerics::{solve_linear, solve_qp_from, Matrix, QpProblem, QpStatus, Vector};
use crate::supervisor::CoalitionGain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Prediction horizon N_p (steps).
    pub prediction_horizon: usize,
    /// Control horizon N_c (steps).
    pub control_horizon: usize,
    /// Weight on level errors.
    pub level_weight: f64,
    /// Weight on flow increments.
    pub input_weight: f64,
    /// Weight on the positive-flow slacks.
    pub slack_weight: f64,
    /// Weight on the setpoint equality slack.
    pub setpoint_slack_weight: f64,
    /// Cost of one active link per step.
    pub link_cost: f64,
    /// Sample time T_c (s).
    pub sample_time: f64,
    /// Bound on |Δq| (m³/s).
    pub max_increment: f64,
    /// Flows are kept at or above this value (m³/s).
    pub flow_margin: f64,
    /// Samples kept for filter warm starts.
    pub history_len: usize,
    pub noise: KalmanNoise,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            prediction_horizon: 10,
            control_horizon: 3,
            level_weight: 250.0,
            input_weight: 2800.0,
            slack_weight: 1e4,
            setpoint_slack_weight: 1e3,
            link_cost: 0.6,
            sample_time: 300.0,
            max_increment: 1.0,
            flow_margin: 0.01,
            history_len: 20,
            noise: KalmanNoise::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("controller.{field}: {why}")));
        if self.prediction_horizon == 0 {
            return bad("prediction_horizon", "must be positive");
        }
        if self.control_horizon == 0 || self.control_horizon > self.prediction_horizon {
            return bad("control_horizon", "must be in 1..=prediction_horizon");
        }
        if !(self.level_weight >= 0.0) {
            return bad("level_weight", "must be nonnegative");
        }
        for (name, v) in [
            ("input_weight", self.input_weight),
            ("slack_weight", self.slack_weight),
            ("setpoint_slack_weight", self.setpoint_slack_weight),
            ("sample_time", self.sample_time),
            ("max_increment", self.max_increment),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, "must be positive");
            }
        }
        if !(self.link_cost >= 0.0) {
            return bad("link_cost", "must be nonnegative");
        }
        if !(self.flow_margin > 0.0) {
            return bad("flow_margin", "must be positive");
        }
        if self.history_len == 0 {
            return bad("history_len", "must be positive");
        }
        self.noise.validate()
    }
}

/// Filter tuning. Process terms are per-step variances, measurement terms
/// are variances of the sensor readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanNoise {
    pub flow_process: f64,
    pub level_process: f64,
    pub omega_process: f64,
    pub level_measurement: f64,
    pub flow_measurement: f64,
    pub prior_state: f64,
    pub prior_omega: f64,
}

impl Default for KalmanNoise {
    fn default() -> Self {
        Self {
            flow_process: 1e-4,
            level_process: 1e-6,
            omega_process: 1e-2,
            level_measurement: 1e-6,
            flow_measurement: 1e-4,
            prior_state: 1e-4,
            prior_omega: 1e4,
        }
    }
}

impl KalmanNoise {
    fn validate(&self) -> Result<()> {
        let fields = [
            ("flow_process", self.flow_process),
            ("level_process", self.level_process),
            ("omega_process", self.omega_process),
            ("level_measurement", self.level_measurement),
            ("flow_measurement", self.flow_measurement),
            ("prior_state", self.prior_state),
            ("prior_omega", self.prior_omega),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("controller.noise.{name}: must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// One global sample: what every agent measured at step `k` and what was
/// applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Level errors e_i(k).
    pub levels: Vec<f64>,
    /// Per reach, the gate flow record `q_i(k-1), …, q_i(k-d_i)`.
    pub flow_lines: Vec<Vec<f64>>,
    /// Offtakes p_i(k).
    pub offtakes: Vec<f64>,
    /// Increments Δq_i(k) applied at this step.
    pub inputs: Vec<f64>,
}

/// Fixed-capacity record of recent samples, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    capacity: usize,
    samples: VecDeque<Sample>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "history capacity must be positive");
        Self {
            capacity,
            samples: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, sample: Sample) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }

    pub fn latest(&self) -> Option<&Sample> {
        self.samples.back()
    }

    pub fn latest_mut(&mut self) -> Option<&mut Sample> {
        self.samples.back_mut()
    }
}

/// Filter state over `[ξ; ω]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub estimate: Vector,
    pub covariance: Matrix,
    states: usize,
}

impl KalmanState {
    pub fn xi(&self) -> Vector {
        self.estimate.rows(0, self.states).into_owned()
    }

    pub fn omega(&self) -> Vector {
        let c = self.estimate.len() - self.states;
        self.estimate.rows(self.states, c).into_owned()
    }
}

fn member_values(model: &CoalitionModel, global: &[f64]) -> Vector {
    Vector::from_iterator(model.m(), model.members.iter().map(|&s| global[s]))
}

/// Coalition measurement `[levels; newest gate flows]` from a global sample.
pub fn measurement(model: &CoalitionModel, sample: &Sample) -> Vector {
    let levels = model.members.iter().map(|&s| sample.levels[s]);
    let flows = model.members.iter().map(|&s| sample.flow_lines[s][0]);
    Vector::from_iterator(2 * model.m(), levels.chain(flows))
}

/// Coalition state assembled directly from a sample's readings.
fn measured_state(model: &CoalitionModel, sample: &Sample) -> Vector {
    let mut x = Vector::zeros(model.n());
    for (a, &s) in model.members.iter().enumerate() {
        let o = model.offsets[a];
        let d = model.delays[a];
        for j in 0..d {
            x[o + j] = sample.flow_lines[s][j];
        }
        x[o + d] = sample.levels[s];
    }
    x
}

struct Augmented {
    f: Matrix,
    bu: Matrix,
    bp: Matrix,
    h: Matrix,
    process: Matrix,
    measurement: Matrix,
}

fn augmented(model: &CoalitionModel, noise: &KalmanNoise) -> Augmented {
    let n = model.n();
    let c = model.channel_count();
    let m = model.m();
    let mut f = Matrix::identity(n + c, n + c);
    f.view_mut((0, 0), (n, n)).copy_from(&model.xi);
    f.view_mut((0, n), (n, c)).copy_from(&model.psi);
    let mut bu = Matrix::zeros(n + c, m);
    bu.view_mut((0, 0), (n, m)).copy_from(&model.upsilon);
    let mut bp = Matrix::zeros(n + c, m);
    bp.view_mut((0, 0), (n, m)).copy_from(&model.phi);
    let mut h = Matrix::zeros(2 * m, n + c);
    for (a, (&o, &d)) in model.offsets.iter().zip(&model.delays).enumerate() {
        h[(a, o + d)] = 1.0;
        h[(m + a, o)] = 1.0;
    }
    let mut process = Matrix::zeros(n + c, n + c);
    for r in model.flow_rows() {
        process[(r, r)] = noise.flow_process;
    }
    for r in model.level_rows() {
        process[(r, r)] = noise.level_process;
    }
    for j in 0..c {
        process[(n + j, n + j)] = noise.omega_process;
    }
    let mut measurement = Matrix::zeros(2 * m, 2 * m);
    for a in 0..m {
        measurement[(a, a)] = noise.level_measurement;
        measurement[(m + a, m + a)] = noise.flow_measurement;
    }
    Augmented {
        f,
        bu,
        bp,
        h,
        process,
        measurement,
    }
}

/// Warm-starts a coalition filter from the shared history.
///
/// The prior is the state read off the oldest replayed sample with `ω̂ = 0`;
/// the remaining samples are then filtered in order, so the result is the
/// filtered estimate at the latest sample.
pub fn kf_init(model: &CoalitionModel, history: &HistoryBuffer, noise: &KalmanNoise) -> Result<KalmanState> {
    let first = history
        .iter()
        .next()
        .ok_or_else(|| Error::Config("filter warm start needs at least one sample".into()))?;
    let n = model.n();
    let c = model.channel_count();
    let mut estimate = Vector::zeros(n + c);
    estimate.rows_mut(0, n).copy_from(&measured_state(model, first));
    let mut covariance = Matrix::zeros(n + c, n + c);
    for i in 0..n {
        covariance[(i, i)] = noise.prior_state;
    }
    for j in 0..c {
        covariance[(n + j, n + j)] = noise.prior_omega;
    }
    let mut kf = KalmanState {
        estimate,
        covariance,
        states: n,
    };
    let samples: Vec<&Sample> = history.iter().collect();
    for pair in samples.windows(2) {
        let (prev, cur) = (pair[0], pair[1]);
        kf = kf_update(
            &kf,
            model,
            noise,
            &member_values(model, &prev.inputs),
            &member_values(model, &prev.offtakes),
            &measurement(model, cur),
        )?;
    }
    Ok(kf)
}

/// One predict/correct cycle: propagate with the input and offtakes applied
/// at the previous step, then correct with the new measurement.
pub fn kf_update(
    kf: &KalmanState,
    model: &CoalitionModel,
    noise: &KalmanNoise,
    input: &Vector,
    offtakes: &Vector,
    y: &Vector,
) -> Result<KalmanState> {
    let aug = augmented(model, noise);
    let x_pred = &aug.f * &kf.estimate + &aug.bu * input + &aug.bp * offtakes;
    let p_pred = &aug.f * &kf.covariance * aug.f.transpose() + &aug.process;
    let ht = aug.h.transpose();
    let s = &aug.h * &p_pred * &ht + &aug.measurement;
    // K = P Hᵀ S⁻¹, computed as (S⁻¹ H P)ᵀ since S and P are symmetric
    let lu = crate::numerics::LuFactor::new(&s)?;
    let gain = lu.solve_matrix(&(&aug.h * &p_pred))?.transpose();
    let innovation = y - &aug.h * &x_pred;
    let estimate = x_pred + &gain * innovation;
    let dim = estimate.len();
    let ikh = Matrix::identity(dim, dim) - &gain * &aug.h;
    let cov = &ikh * p_pred * ikh.transpose() + &gain * &aug.measurement * gain.transpose();
    let covariance = (&cov + cov.transpose()) * 0.5;
    Ok(KalmanState {
        estimate,
        covariance,
        states: kf.states,
    })
}

/// Steady state with zero level errors compensating offtakes `rho` and the
/// boundary estimate `omega`:
/// `(I − Ξ) ξ̄ − Υ ῡ = Φ ρ + Ψ ω̂`, `Γ ξ̄ = 0`.
pub fn compute_setpoint(model: &CoalitionModel, rho: &Vector, omega: &Vector) -> Result<(Vector, Vector)> {
    let n = model.n();
    let m = model.m();
    let mut a = Matrix::zeros(n + m, n + m);
    a.view_mut((0, 0), (n, n))
        .copy_from(&(Matrix::identity(n, n) - &model.xi));
    a.view_mut((0, n), (n, m)).copy_from(&(-&model.upsilon));
    a.view_mut((n, 0), (m, n)).copy_from(&model.gamma);
    let mut b = Vector::zeros(n + m);
    b.rows_mut(0, n).copy_from(&(&model.phi * rho + &model.psi * omega));
    let sol = solve_linear(&a, &b).map_err(|source| Error::Setpoint {
        members: model.members.clone(),
        source,
    })?;
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setpoint {
    pub state: Vector,
    pub input: Vector,
    /// Slack of the steady-state equality.
    pub slack: Vector,
    pub feasible: bool,
}

/// Nearest setpoint to `(ξ̄, ῡ)` that keeps every flow at or above the margin
/// and makes the first LQ move `K(ξ(k) − ξˢ) + υˢ` respect the increment box.
#[allow(clippy::too_many_arguments)]
pub fn feasible_setpoint(
    model: &CoalitionModel,
    xbar: &Vector,
    ubar: &Vector,
    xi_now: &Vector,
    gain: &Matrix,
    rho: &Vector,
    omega: &Vector,
    cfg: &ControllerConfig,
) -> Result<Setpoint> {
    let n = model.n();
    let m = model.m();
    let nz = 2 * n + m;
    let mut h = Matrix::zeros(nz, nz);
    for r in model.level_rows() {
        h[(r, r)] = 2.0 * cfg.level_weight;
    }
    for j in 0..m {
        h[(n + j, n + j)] = 2.0 * cfg.input_weight;
    }
    for j in 0..n {
        h[(n + m + j, n + m + j)] = 2.0 * cfg.setpoint_slack_weight;
    }
    let mut f = Vector::zeros(nz);
    f.rows_mut(n, m).copy_from(&(ubar * (-2.0 * cfg.input_weight)));

    let mut aeq = Matrix::zeros(n, nz);
    aeq.view_mut((0, 0), (n, n))
        .copy_from(&(Matrix::identity(n, n) - &model.xi));
    aeq.view_mut((0, n), (n, m)).copy_from(&(-&model.upsilon));
    aeq.view_mut((0, n + m), (n, n)).copy_from(&(-Matrix::identity(n, n)));
    let beq = &model.phi * rho + &model.psi * omega;

    let flows = model.flow_rows();
    let rows = flows.len() + 2 * m;
    let mut ain = Matrix::zeros(rows, nz);
    let mut bin = Vector::zeros(rows);
    for (i, &r) in flows.iter().enumerate() {
        ain[(i, r)] = -1.0;
        bin[i] = -cfg.flow_margin;
    }
    let k_now = gain * xi_now;
    let base = flows.len();
    for j in 0..m {
        // K(ξ − ξˢ) + υˢ ≤ du  and  ≥ −du
        for c in 0..n {
            ain[(base + j, c)] = -gain[(j, c)];
            ain[(base + m + j, c)] = gain[(j, c)];
        }
        ain[(base + j, n + j)] = 1.0;
        ain[(base + m + j, n + j)] = -1.0;
        bin[base + j] = cfg.max_increment - k_now[j];
        bin[base + m + j] = cfg.max_increment + k_now[j];
    }
    let problem = QpProblem::new(h, f)
        .with_equalities(aeq, beq)
        .with_inequalities(ain, bin);
    let mut start = Vector::zeros(nz);
    start.rows_mut(0, n).copy_from(xbar);
    start.rows_mut(n, m).copy_from(ubar);
    let sol = solve_qp_from(&problem, &start)?;
    if sol.status == QpStatus::Infeasible {
        return Err(Error::Infeasible {
            what: "setpoint",
            members: model.members.clone(),
        });
    }
    Ok(Setpoint {
        state: sol.x.rows(0, n).into_owned(),
        input: sol.x.rows(n, m).into_owned(),
        slack: sol.x.rows(n + m, n).into_owned(),
        feasible: sol.status == QpStatus::Optimal,
    })
}

/// Status of one MPC solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpcStatus {
    Optimal,
    /// The box could not be met over the whole horizon; it was kept only on
    /// the free moves.
    Relaxed,
    MaxIterations,
}

impl MpcStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            MpcStatus::Optimal => "optimal",
            MpcStatus::Relaxed => "relaxed",
            MpcStatus::MaxIterations => "max-iterations",
        }
    }
}

impl std::str::FromStr for MpcStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(MpcStatus::Optimal),
            "relaxed" => Ok(MpcStatus::Relaxed),
            "max-iterations" => Ok(MpcStatus::MaxIterations),
            other => Err(Error::Schema(format!("unknown solver status {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// υ′(0), …, υ′(N_c − 1).
    pub moves: Vec<Vector>,
    /// ε(1), …, ε(N_p), one entry per member gate.
    pub slacks: Vec<Vector>,
    pub status: MpcStatus,
    pub input_decision_vars: usize,
    pub decision_vars: usize,
}

/// Condensed prediction `ζ(t) = c_t + L_t u` for t = 0..=N_p.
struct Prediction {
    free: Vec<Vector>,
    forced: Vec<Matrix>,
}

fn predict(acl: &Matrix, upsilon: &Matrix, zeta: &Vector, np: usize, nc: usize) -> Prediction {
    let n = acl.nrows();
    let m = upsilon.ncols();
    let mut free = Vec::with_capacity(np + 1);
    let mut forced = Vec::with_capacity(np + 1);
    free.push(zeta.clone());
    forced.push(Matrix::zeros(n, m * nc));
    for t in 0..np {
        let mut next = acl * &forced[t];
        if t < nc {
            let mut blk = next.view_mut((0, t * m), (n, m));
            blk += upsilon;
        }
        free.push(acl * &free[t]);
        forced.push(next);
    }
    Prediction { free, forced }
}

/// Solves the coalition MPC problem for the correction sequence `υ′`.
///
/// The LQ feedback `K ζ` acts over the whole horizon; `υ′` has `N_c` free
/// moves and is zero afterwards. The box `|K ζ(t) + υ′(t) + υˢ| ≤ du` is hard
/// for `t ∈ [0, N_p]`; the flow floor on each gate's newest inflow is softened
/// by `ε(t) ≥ 0` for `t ∈ [1, N_p]`.
pub fn mpc_step(
    model: &CoalitionModel,
    zeta: &Vector,
    setpoint: &Setpoint,
    gain: &Matrix,
    terminal: &Matrix,
    cfg: &ControllerConfig,
) -> Result<MpcSolution> {
    let m = model.m();
    let np = cfg.prediction_horizon;
    let nc = cfg.control_horizon;
    let nu = m * nc;
    let ne = m * np;
    let nz = nu + ne;
    let acl = &model.xi + &model.upsilon * gain;
    let pred = predict(&acl, &model.upsilon, zeta, np, nc);
    let q = model.level_weight(cfg.level_weight);
    let r = Matrix::identity(m, m) * cfg.input_weight;

    // ν(t) = K ζ(t) + υ′(t) = K c_t + G_t u
    let input_map = |t: usize| -> Matrix {
        let mut g = gain * &pred.forced[t];
        if t < nc {
            for j in 0..m {
                g[(j, t * m + j)] += 1.0;
            }
        }
        g
    };

    let mut h = Matrix::zeros(nz, nz);
    let mut f = Vector::zeros(nz);
    {
        let mut huu = Matrix::zeros(nu, nu);
        let mut fu = Vector::zeros(nu);
        for t in 0..np {
            let l = &pred.forced[t];
            let c = &pred.free[t];
            let g = input_map(t);
            let kc = gain * c;
            huu += l.transpose() * &q * l + g.transpose() * &r * &g;
            fu += l.transpose() * (&q * c) + g.transpose() * (&r * kc);
        }
        let l = &pred.forced[np];
        huu += l.transpose() * terminal * l;
        fu += l.transpose() * (terminal * &pred.free[np]);
        h.view_mut((0, 0), (nu, nu))
            .copy_from(&((&huu + huu.transpose()) * 1.0));
        f.rows_mut(0, nu).copy_from(&(fu * 2.0));
        for i in 0..ne {
            h[(nu + i, nu + i)] = 2.0 * cfg.slack_weight;
        }
    }

    let box_rows = 2 * m * (np + 1);
    let rows = box_rows + 2 * ne;
    let mut ain = Matrix::zeros(rows, nz);
    let mut bin = Vector::zeros(rows);
    for t in 0..=np {
        let g = input_map(t);
        let offset = gain * &pred.free[t] + &setpoint.input;
        for j in 0..m {
            let up = 2 * m * t + j;
            let down = up + m;
            for c in 0..nu {
                ain[(up, c)] = g[(j, c)];
                ain[(down, c)] = -g[(j, c)];
            }
            bin[up] = cfg.max_increment - offset[j];
            bin[down] = cfg.max_increment + offset[j];
        }
    }
    let newest = model.newest_flow_rows();
    for t in 1..=np {
        for (a, &row) in newest.iter().enumerate() {
            let e = (t - 1) * m + a;
            let i = box_rows + e;
            for c in 0..nu {
                ain[(i, c)] = -pred.forced[t][(row, c)];
            }
            ain[(i, nu + e)] = -1.0;
            bin[i] = pred.free[t][row] + setpoint.state[row] - cfg.flow_margin;
            let j = box_rows + ne + e;
            ain[(j, nu + e)] = -1.0;
        }
    }

    let start = greedy_start(model, &pred, &acl, gain, setpoint, cfg);
    let problem = QpProblem::new(h, f).with_inequalities(ain, bin);
    let mut sol = solve_qp_from(&problem, &start)?;
    let mut status = match sol.status {
        QpStatus::Optimal => MpcStatus::Optimal,
        QpStatus::MaxIterations => MpcStatus::MaxIterations,
        QpStatus::Infeasible => MpcStatus::Relaxed,
    };
    if status == MpcStatus::Relaxed {
        // keep the box only where υ′ is free; always feasible from the start
        let keep: Vec<usize> = (0..rows).filter(|&i| i >= box_rows || i / (2 * m) < nc).collect();
        let ain_r = Matrix::from_fn(keep.len(), nz, |i, c| problem.ain[(keep[i], c)]);
        let bin_r = Vector::from_fn(keep.len(), |i, _| problem.bin[keep[i]]);
        let relaxed = QpProblem::new(problem.h.clone(), problem.f.clone()).with_inequalities(ain_r, bin_r);
        sol = solve_qp_from(&relaxed, &start)?;
        if sol.status != QpStatus::Optimal {
            return Err(Error::Infeasible {
                what: "mpc",
                members: model.members.clone(),
            });
        }
        status = MpcStatus::Relaxed;
    }
    let moves = (0..nc).map(|t| sol.x.rows(t * m, m).into_owned()).collect();
    let slacks = (0..np).map(|t| sol.x.rows(nu + t * m, m).into_owned()).collect();
    Ok(MpcSolution {
        moves,
        slacks,
        status,
        input_decision_vars: nu,
        decision_vars: nz,
    })
}

/// Start point that clamps each free move into the box and sets every slack
/// to its smallest admissible value.
fn greedy_start(
    model: &CoalitionModel,
    pred: &Prediction,
    acl: &Matrix,
    gain: &Matrix,
    setpoint: &Setpoint,
    cfg: &ControllerConfig,
) -> Vector {
    let m = model.m();
    let np = cfg.prediction_horizon;
    let nc = cfg.control_horizon;
    let nu = m * nc;
    let mut z = Vector::zeros(nu + m * np);
    let mut zeta = pred.free[0].clone();
    let newest = model.newest_flow_rows();
    for t in 0..np {
        let lq = gain * &zeta + &setpoint.input;
        let mut mv = Vector::zeros(m);
        if t < nc {
            for j in 0..m {
                mv[j] = lq[j].clamp(-cfg.max_increment, cfg.max_increment) - lq[j];
            }
            z.rows_mut(t * m, m).copy_from(&mv);
        }
        zeta = acl * &zeta + &model.upsilon * &mv;
        for (a, &row) in newest.iter().enumerate() {
            let flow = zeta[row] + setpoint.state[row];
            z[nu + t * m + a] = (cfg.flow_margin - flow).max(0.0);
        }
    }
    z
}

/// `υ = K ζ + υˢ + υ′(0)`.
pub fn control_action(zeta: &Vector, setpoint_input: &Vector, correction: &Vector, gain: &Matrix) -> Vector {
    gain * zeta + setpoint_input + correction
}

/// What one coalition did at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerOutput {
    pub input: Vector,
    pub setpoint: Setpoint,
    pub omega: Vector,
    pub status: MpcStatus,
    pub input_decision_vars: usize,
    pub decision_vars: usize,
}

/// State machine running the bottom layer for one coalition.
#[derive(Debug, Clone)]
pub struct CoalitionController {
    pub model: CoalitionModel,
    pub gain: Arc<CoalitionGain>,
    pub filter: KalmanState,
}

impl CoalitionController {
    /// Builds the controller, warm-starting its filter from `history`.
    pub fn new(
        model: CoalitionModel,
        gain: Arc<CoalitionGain>,
        history: &HistoryBuffer,
        cfg: &ControllerConfig,
    ) -> Result<Self> {
        let filter = kf_init(&model, history, &cfg.noise)?;
        Ok(Self { model, gain, filter })
    }

    pub fn members(&self) -> &[usize] {
        &self.model.members
    }

    /// Filters the newest sample given the previous one.
    pub fn observe(&mut self, previous: &Sample, current: &Sample, cfg: &ControllerConfig) -> Result<()> {
        self.filter = kf_update(
            &self.filter,
            &self.model,
            &cfg.noise,
            &member_values(&self.model, &previous.inputs),
            &member_values(&self.model, &previous.offtakes),
            &measurement(&self.model, current),
        )?;
        Ok(())
    }

    /// Setpoint, MPC and control action for the current offtakes.
    pub fn act(&self, offtakes: &[f64], cfg: &ControllerConfig) -> Result<ControllerOutput> {
        let rho = member_values(&self.model, offtakes);
        let xi = self.filter.xi();
        let omega = self.filter.omega();
        let k = &self.gain.k;
        let (xbar, ubar) = compute_setpoint(&self.model, &rho, &omega)?;
        let setpoint = feasible_setpoint(&self.model, &xbar, &ubar, &xi, k, &rho, &omega, cfg)?;
        let zeta = &xi - &setpoint.state;
        let mpc = mpc_step(&self.model, &zeta, &setpoint, k, &self.gain.p, cfg)?;
        let mut input = control_action(&zeta, &setpoint.input, &mpc.moves[0], k);
        // the box holds at t = 0 up to solver roundoff
        for v in input.iter_mut() {
            let excess = v.abs() - cfg.max_increment;
            if excess > 1e-7 {
                return Err(Error::Infeasible {
                    what: "increment box",
                    members: self.model.members.clone(),
                });
            }
            *v = v.clamp(-cfg.max_increment, cfg.max_increment);
        }
        Ok(ControllerOutput {
            input,
            setpoint,
            omega,
            status: mpc.status,
            input_decision_vars: mpc.input_decision_vars,
            decision_vars: mpc.decision_vars,
        })
    }
}
