//! Closed-loop harness: an integrator-delay plant driven by the two-layer
//! controller, scenario schedules and cost accounting.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canal_model::{CanalModel, CoalitionModel, HEAD_CAPACITY};
use crate::coalition_ctrl::{
    CoalitionController, ControllerConfig, ControllerOutput, HistoryBuffer, MpcStatus, Sample,
};
use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::supervisor::{select_topology, Candidate, GainSet, PublishedSetpoints, SelectionContext, SynthesisCache};
use crate::topology::{partition_of, Topology};

/// Piecewise-constant offtake of one reach: `(step, value)` pairs, the value
/// holding from its step until the next change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfftakeSchedule {
    /// 1-based reach number.
    pub reach: usize,
    pub schedule: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub horizon: usize,
    /// Offtake of reaches without a schedule (m³/s).
    #[serde(default = "default_offtake")]
    pub default_offtake: f64,
    #[serde(default)]
    pub offtakes: Vec<OfftakeSchedule>,
}

fn default_offtake() -> f64 {
    2.0
}

impl Scenario {
    /// Constant offtakes over `horizon` steps.
    pub fn constant(name: &str, horizon: usize, offtakes: &[f64]) -> Self {
        Self {
            name: name.into(),
            horizon,
            default_offtake: 0.0,
            offtakes: offtakes
                .iter()
                .enumerate()
                .map(|(i, &v)| OfftakeSchedule {
                    reach: i + 1,
                    schedule: vec![(0, v)],
                })
                .collect(),
        }
    }

    /// Step decrease at k = 72 in reaches 4, 9, 10 and 13.
    pub fn dez_scenario1() -> Self {
        Self::dez("dez_scenario1", false)
    }

    /// Scenario 1 with the offtakes restored at k = 144.
    pub fn dez_scenario2() -> Self {
        Self::dez("dez_scenario2", true)
    }

    fn dez(name: &str, restore: bool) -> Self {
        let steps = [(4, 10.0, 0.0), (9, 10.0, 5.0), (10, 6.25, 1.25), (13, 12.5, 2.5)];
        Self {
            name: name.into(),
            horizon: 288,
            default_offtake: 2.0,
            offtakes: steps
                .iter()
                .map(|&(reach, before, after)| {
                    let mut schedule = vec![(0, before), (72, after)];
                    if restore {
                        schedule.push((144, before));
                    }
                    OfftakeSchedule { reach, schedule }
                })
                .collect(),
        }
    }

    /// Bundled scenario by name.
    pub fn named(name: &str) -> Option<Self> {
        match name {
            "dez_scenario1" | "scenario1" | "1" => Some(Self::dez_scenario1()),
            "dez_scenario2" | "scenario2" | "2" => Some(Self::dez_scenario2()),
            _ => None,
        }
    }

    pub fn validate(&self, reaches: usize) -> Result<()> {
        let bad = |why: String| Err(Error::Config(format!("scenario {}: {why}", self.name)));
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !(self.default_offtake >= 0.0) {
            return bad("default_offtake must be nonnegative".into());
        }
        let mut seen = vec![false; reaches];
        for s in &self.offtakes {
            if s.reach == 0 || s.reach > reaches {
                return bad(format!("offtake reach {} does not exist", s.reach));
            }
            if std::mem::replace(&mut seen[s.reach - 1], true) {
                return bad(format!("reach {} scheduled twice", s.reach));
            }
            if s.schedule.first().map(|c| c.0) != Some(0) {
                return bad(format!("reach {} schedule must start at step 0", s.reach));
            }
            if s.schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
                return bad(format!("reach {} schedule steps must increase", s.reach));
            }
            if s.schedule.iter().any(|c| !(c.1 >= 0.0)) {
                return bad(format!("reach {} has a negative offtake", s.reach));
            }
        }
        let inflow: f64 = self.offtakes_at(0, reaches).iter().sum();
        if inflow > HEAD_CAPACITY {
            return bad(format!("initial demand {inflow} exceeds head capacity {HEAD_CAPACITY}"));
        }
        Ok(())
    }

    /// Offtakes in force at step `k`, 0-based by reach.
    pub fn offtakes_at(&self, k: usize, reaches: usize) -> Vec<f64> {
        let mut p = vec![self.default_offtake; reaches];
        for s in &self.offtakes {
            if let Some(&(_, v)) = s.schedule.iter().rev().find(|c| c.0 <= k) {
                p[s.reach - 1] = v;
            }
        }
        p
    }

    /// Head inflow needed at the initial offtakes, as a fraction of capacity.
    pub fn initial_regime(&self, reaches: usize) -> f64 {
        self.offtakes_at(0, reaches).iter().sum::<f64>() / HEAD_CAPACITY
    }
}

/// Plant parameter perturbations and sensor noise.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// Multipliers on each reach's backwater surface; empty means none.
    pub surface_factors: Vec<f64>,
    /// Additive offsets on each reach's delay; empty means none.
    pub delay_offsets: Vec<i64>,
    /// Random ±`mismatch` surface factors drawn from the seed, used when
    /// `surface_factors` is empty.
    pub mismatch: Option<f64>,
    /// Standard deviation of level measurement noise (m).
    pub level_noise: f64,
}

impl PlantConfig {
    pub fn validate(&self, reaches: usize) -> Result<()> {
        let bad = |why: &str| Err(Error::Config(format!("plant.{why}")));
        if !self.surface_factors.is_empty() && self.surface_factors.len() != reaches {
            return bad("surface_factors: one entry per reach required");
        }
        if self.surface_factors.iter().any(|f| !(*f > 0.0)) {
            return bad("surface_factors: must be positive");
        }
        if !self.delay_offsets.is_empty() && self.delay_offsets.len() != reaches {
            return bad("delay_offsets: one entry per reach required");
        }
        if let Some(m) = self.mismatch {
            if !(0.0..1.0).contains(&m) {
                return bad("mismatch: must be in [0, 1)");
            }
        }
        if !(self.level_noise >= 0.0) {
            return bad("level_noise: must be nonnegative");
        }
        Ok(())
    }

    /// Surface multipliers actually applied.
    pub fn factors(&self, reaches: usize, seed: u64) -> Vec<f64> {
        if !self.surface_factors.is_empty() {
            return self.surface_factors.clone();
        }
        match self.mismatch {
            Some(m) if m > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a5a5);
                (0..reaches)
                    .map(|_| if rng.random_bool(0.5) { 1.0 + m } else { 1.0 - m })
                    .collect()
            }
            _ => vec![1.0; reaches],
        }
    }
}

/// Integrator-delay plant with its own parameters and gate-flow record.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    surfaces: Vec<f64>,
    delays: Vec<usize>,
    t_c: f64,
    /// Per reach, gate flows newest first: `q(k-1), q(k-2), …`.
    gates: Vec<VecDeque<f64>>,
    levels: Vec<f64>,
}

impl Plant {
    /// Plant at rest with flows telescoped from `offtakes` and zero level
    /// errors.
    pub fn new(canal: &CanalModel, cfg: &PlantConfig, seed: u64, offtakes: &[f64]) -> Result<Self> {
        let n = canal.len();
        cfg.validate(n)?;
        let factors = cfg.factors(n, seed);
        let mut surfaces = Vec::with_capacity(n);
        let mut delays = Vec::with_capacity(n);
        for (i, s) in canal.subsystems.iter().enumerate() {
            surfaces.push(canal.t_c / s.gain * factors[i]);
            let off = cfg.delay_offsets.get(i).copied().unwrap_or(0);
            let d = s.delay as i64 + off;
            if d < 1 {
                return Err(Error::Config(format!(
                    "plant.delay_offsets: reach {} delay {d} < 1",
                    i + 1
                )));
            }
            delays.push(d as usize);
        }
        let flows = canal.steady_flows(offtakes);
        let gates = canal
            .subsystems
            .iter()
            .enumerate()
            .map(|(i, s)| VecDeque::from(vec![flows[i]; s.delay.max(delays[i])]))
            .collect();
        Ok(Self {
            surfaces,
            delays,
            t_c: canal.t_c,
            gates,
            levels: vec![0.0; n],
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Current gate flows `q_i(k-1)`.
    pub fn gate_flows(&self) -> Vec<f64> {
        self.gates.iter().map(|g| g[0]).collect()
    }

    /// Most recent `len` gate flows of reach `i`, newest first.
    pub fn flow_line(&self, i: usize, len: usize) -> Vec<f64> {
        self.gates[i].iter().take(len).copied().collect()
    }

    pub fn surfaces(&self) -> &[f64] {
        &self.surfaces
    }

    /// Water stored above reference plus water in transit (m³).
    pub fn storage(&self) -> f64 {
        let pooled: f64 = self.levels.iter().zip(&self.surfaces).map(|(e, a)| e * a).sum();
        let transit: f64 = self
            .gates
            .iter()
            .zip(&self.delays)
            .map(|(g, &d)| g.iter().take(d).sum::<f64>())
            .sum();
        pooled + self.t_c * transit
    }

    /// Advances one sample with gate increments `inputs` and `offtakes`.
    pub fn step(&mut self, inputs: &[f64], offtakes: &[f64]) {
        let n = self.levels.len();
        let new: Vec<f64> = (0..n).map(|i| self.gates[i][0] + inputs[i]).collect();
        for i in 0..n {
            let arriving = self.gates[i][self.delays[i] - 1];
            let leaving = if i + 1 < n { new[i + 1] } else { 0.0 } + offtakes[i];
            self.levels[i] += self.t_c / self.surfaces[i] * (arriving - leaving);
        }
        for (g, q) in self.gates.iter_mut().zip(new) {
            g.push_front(q);
            g.pop_back();
        }
    }
}

/// One step of the nominal global model `ξ⁺ = Ξ ξ + Υ Δq + Φ p`.
pub fn plant_step(canal: &CanalModel, x: &Vector, inputs: &Vector, offtakes: &Vector) -> Vector {
    let g = canal.global();
    &g.xi * x + &g.upsilon * inputs + &g.phi * offtakes
}

/// Per-coalition record of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionRecord {
    pub members: Vec<usize>,
    pub status: MpcStatus,
    pub input_decision_vars: usize,
    /// Boundary outflow estimates, one per channel.
    pub omega: Vec<f64>,
    /// Setpoint gate flow of each member.
    pub setpoint_flows: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Level errors e_i(k).
    pub levels: Vec<f64>,
    /// Gate flows q_i(k) after the increment.
    pub flows: Vec<f64>,
    pub inputs: Vec<f64>,
    pub offtakes: Vec<f64>,
    pub topology: Topology,
    /// `Σ_i Q e_i² + R Δq_i²`.
    pub performance_cost: f64,
    /// `c_ℓ |Λ(k)|` at the run's link cost.
    pub network_cost: f64,
    pub coalitions: Vec<CoalitionRecord>,
}

impl StepRecord {
    pub fn input_decision_vars(&self) -> usize {
        self.coalitions.iter().map(|c| c.input_decision_vars).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub reaches: usize,
    pub steps: Vec<StepRecord>,
}

/// A supervisor decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub step: usize,
    pub incumbent: Topology,
    pub chosen: Topology,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub trace: SimTrace,
    pub decisions: Vec<Decision>,
    pub dare_solves: usize,
}

/// How the topology is chosen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyMode {
    /// Supervisor every `interval` steps, starting from `initial`.
    Supervised { initial: Topology, interval: usize },
    /// Fixed topology, no supervisor.
    Fixed(Topology),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub controller: ControllerConfig,
    pub plant: PlantConfig,
    pub mode: TopologyMode,
    pub cache: bool,
    pub seed: u64,
}

impl SimConfig {
    /// Supervised run starting from the full topology over `agents`.
    pub fn coalitional(
        agents: usize,
        controller: ControllerConfig,
        plant: PlantConfig,
        interval: usize,
        seed: u64,
    ) -> Self {
        Self {
            controller,
            plant,
            mode: TopologyMode::Supervised {
                initial: Topology::full(agents),
                interval,
            },
            cache: true,
            seed,
        }
    }
}

struct Loop<'a> {
    canal: &'a CanalModel,
    cfg: &'a SimConfig,
    cache: SynthesisCache,
    history: HistoryBuffer,
    topology: Topology,
    controllers: Vec<CoalitionController>,
    published: PublishedSetpoints,
}

impl Loop<'_> {
    fn install(&mut self, gains: &GainSet) -> Result<()> {
        let mut old = std::mem::take(&mut self.controllers);
        for g in &gains.blocks {
            match old.iter().position(|c| c.members() == g.members.as_slice()) {
                Some(pos) => self.controllers.push(old.swap_remove(pos)),
                None => {
                    let model = CoalitionModel::build(self.canal, &g.members);
                    let c = CoalitionController::new(model, Arc::clone(g), &self.history, &self.cfg.controller)?;
                    self.controllers.push(c);
                }
            }
        }
        Ok(())
    }

    fn estimate(&self) -> Vector {
        let mut x = Vector::zeros(self.canal.n());
        for c in &self.controllers {
            c.model.scatter(self.canal, &c.filter.xi(), &mut x);
        }
        x
    }
}

fn sample_of(
    plant: &Plant,
    canal: &CanalModel,
    offtakes: &[f64],
    noise: &mut Option<(ChaCha8Rng, Normal<f64>)>,
) -> Sample {
    let mut levels = plant.levels().to_vec();
    if let Some((rng, dist)) = noise.as_mut() {
        for e in &mut levels {
            *e += dist.sample(rng);
        }
    }
    Sample {
        levels,
        flow_lines: canal
            .subsystems
            .iter()
            .enumerate()
            .map(|(i, s)| plant.flow_line(i, s.delay))
            .collect(),
        offtakes: offtakes.to_vec(),
        inputs: vec![0.0; canal.len()],
    }
}

/// Runs the two-layer controller against the plant over the scenario.
pub fn run_closed_loop(canal: &CanalModel, scenario: &Scenario, cfg: &SimConfig) -> Result<SimRun> {
    let n = canal.len();
    scenario.validate(n)?;
    cfg.controller.validate()?;
    let ctrl = &cfg.controller;
    let (initial, interval) = match &cfg.mode {
        TopologyMode::Supervised { initial, interval } => {
            if *interval == 0 {
                return Err(Error::Config("t_lambda must be positive".into()));
            }
            (initial.clone(), Some(*interval))
        }
        TopologyMode::Fixed(t) => (t.clone(), None),
    };
    if initial.agents() != n {
        return Err(Error::Config(format!(
            "topology {} does not match {n} reaches",
            initial.to_bits()
        )));
    }

    let mut plant = Plant::new(canal, &cfg.plant, cfg.seed, &scenario.offtakes_at(0, n))?;
    let mut noise = if cfg.plant.level_noise > 0.0 {
        let dist = Normal::new(0.0, cfg.plant.level_noise).map_err(|e| Error::Config(e.to_string()))?;
        Some((ChaCha8Rng::seed_from_u64(cfg.seed), dist))
    } else {
        None
    };

    let mut lp = Loop {
        canal,
        cfg,
        cache: SynthesisCache::new(ctrl.level_weight, ctrl.input_weight, cfg.cache),
        history: HistoryBuffer::new(ctrl.history_len),
        topology: initial,
        controllers: Vec::new(),
        published: PublishedSetpoints::at_rest(canal, &plant.gate_flows()),
    };
    let mut steps = Vec::with_capacity(scenario.horizon);
    let mut decisions = Vec::new();

    for k in 0..scenario.horizon {
        let wrap = |source: Error| Error::Step {
            step: k,
            source: Box::new(source),
        };
        let offtakes = scenario.offtakes_at(k, n);
        let sample = sample_of(&plant, canal, &offtakes, &mut noise);
        if k == 0 {
            // The plant is settled before the run starts.
            for _ in 1..ctrl.history_len {
                lp.history.push(sample.clone());
            }
        }
        let previous = lp.history.latest().cloned();
        lp.history.push(sample.clone());

        if k == 0 {
            let gains = lp
                .cache
                .partition(canal, &partition_of(&lp.topology, n))
                .map_err(wrap)?;
            lp.install(&gains).map_err(wrap)?;
        } else if let Some(prev) = &previous {
            for c in &mut lp.controllers {
                c.observe(prev, &sample, ctrl).map_err(wrap)?;
            }
        }

        if let Some(interval) = interval {
            if k % interval == 0 {
                let xi_hat = lp.estimate();
                let ctx = SelectionContext {
                    canal,
                    xi_hat: &xi_hat,
                    published: &lp.published,
                    offtakes: &offtakes,
                    link_cost: ctrl.link_cost,
                    interval,
                };
                let sel = select_topology(&ctx, &lp.topology, &lp.cache).map_err(wrap)?;
                decisions.push(Decision {
                    step: k,
                    incumbent: lp.topology.clone(),
                    chosen: sel.topology.clone(),
                    candidates: sel.candidates,
                });
                if sel.topology != lp.topology {
                    lp.topology = sel.topology;
                    lp.install(&sel.gains).map_err(wrap)?;
                }
            }
        }

        let outputs: Vec<ControllerOutput> = lp
            .controllers
            .par_iter()
            .map(|c| c.act(&offtakes, ctrl))
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;

        let mut inputs = vec![0.0; n];
        let mut coalitions = Vec::with_capacity(outputs.len());
        for (c, out) in lp.controllers.iter().zip(&outputs) {
            for (a, &s) in c.members().iter().enumerate() {
                inputs[s] = out.input[a];
            }
            lp.published.publish(&c.model, &out.setpoint.state, &out.setpoint.input);
            coalitions.push(CoalitionRecord {
                members: c.members().to_vec(),
                status: out.status,
                input_decision_vars: out.input_decision_vars,
                omega: out.omega.iter().copied().collect(),
                setpoint_flows: c.model.offsets.iter().map(|&o| out.setpoint.state[o]).collect(),
            });
        }
        if let Some(last) = lp.history.latest_mut() {
            last.inputs = inputs.clone();
        }

        let gate = plant.gate_flows();
        let performance_cost = sample
            .levels
            .iter()
            .map(|e| ctrl.level_weight * e * e)
            .chain(inputs.iter().map(|u| ctrl.input_weight * u * u))
            .sum();
        steps.push(StepRecord {
            step: k,
            levels: plant.levels().to_vec(),
            flows: gate.iter().zip(&inputs).map(|(q, u)| q + u).collect(),
            inputs: inputs.clone(),
            offtakes: offtakes.clone(),
            topology: lp.topology.clone(),
            performance_cost,
            network_cost: ctrl.link_cost * lp.topology.enabled_count() as f64,
            coalitions,
        });
        plant.step(&inputs, &offtakes);
    }

    Ok(SimRun {
        trace: SimTrace { reaches: n, steps },
        decisions,
        dare_solves: lp.cache.solves(),
    })
}

/// Fixed full topology with links priced at zero.
pub fn run_centralized(canal: &CanalModel, scenario: &Scenario, cfg: &SimConfig) -> Result<SimRun> {
    let mut cfg = cfg.clone();
    cfg.controller.link_cost = 0.0;
    cfg.mode = TopologyMode::Fixed(Topology::full(canal.len()));
    run_closed_loop(canal, scenario, &cfg)
}

/// Averages in the style of the cost and complexity tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub steps: usize,
    pub link_cost: f64,
    pub performance: f64,
    pub network: f64,
    pub combined: f64,
    pub average_links: f64,
    pub average_coalitions: f64,
    /// Input decision variables per coalition problem.
    pub decision_vars_per_coalition: f64,
    pub input_decision_vars_per_step: f64,
    pub peak_level_errors: Vec<f64>,
    pub max_abs_input: f64,
    pub relaxed_solves: usize,
}

/// Average stage costs of `trace` with links priced at `link_cost`.
pub fn accumulate_costs(trace: &SimTrace, link_cost: f64) -> CostReport {
    let steps = trace.steps.len();
    let denom = steps.max(1) as f64;
    let mut report = CostReport {
        steps,
        link_cost,
        performance: 0.0,
        network: 0.0,
        combined: 0.0,
        average_links: 0.0,
        average_coalitions: 0.0,
        decision_vars_per_coalition: 0.0,
        input_decision_vars_per_step: 0.0,
        peak_level_errors: vec![0.0; trace.reaches],
        max_abs_input: 0.0,
        relaxed_solves: 0,
    };
    for s in &trace.steps {
        let links = s.topology.enabled_count() as f64;
        let coalitions = s.coalitions.len().max(1) as f64;
        let vars = s.input_decision_vars() as f64;
        report.performance += s.performance_cost / denom;
        report.network += link_cost * links / denom;
        report.average_links += links / denom;
        report.average_coalitions += s.coalitions.len() as f64 / denom;
        report.decision_vars_per_coalition += vars / coalitions / denom;
        report.input_decision_vars_per_step += vars / denom;
        for (peak, e) in report.peak_level_errors.iter_mut().zip(&s.levels) {
            *peak = peak.max(e.abs());
        }
        for u in &s.inputs {
            report.max_abs_input = report.max_abs_input.max(u.abs());
        }
        report.relaxed_solves += s.coalitions.iter().filter(|c| c.status != MpcStatus::Optimal).count();
    }
    report.combined = report.performance + report.network;
    report
}
